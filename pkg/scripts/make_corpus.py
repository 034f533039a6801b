"""Write the 20-image sample corpus as PPM files: python3 scripts/make_corpus.py DIR"""
import argparse

from chromapred.samples import write_sample_corpus

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("directory")
    ap.add_argument("--count", type=int, default=20)
    args = ap.parse_args()
    for p in write_sample_corpus(args.directory, args.count):
        print(p)
