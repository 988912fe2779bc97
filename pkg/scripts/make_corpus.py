"""Write the synthetic demo corpus (APKs, traces, registry, keys, config)."""
import argparse
import json

from b2mdf.synth import write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    args = ap.parse_args()
    index = write_corpus(args.out)
    print(json.dumps(index, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
