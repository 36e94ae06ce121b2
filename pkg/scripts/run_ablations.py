"""Layer, RN-parameter and augmentation ablations on the desk-scale domains.

    python3 scripts/run_ablations.py --kind layer --out runs/layer
    python3 scripts/run_ablations.py --kind rn --out runs/rn --set eval.seeds=1,2
"""

import argparse
import sys

from bia.cli import main as cli_main
from bia.pipeline import DESK_SCALE


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", choices=("layer", "rn", "aug"), default="layer")
    parser.add_argument("--out", default=None)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()
    argv = ["sweep", "--out", args.out or f"runs/{args.kind}"]
    for key in ("objective.tap", "train.epochs"):
        argv += ["--set", f"{key}={DESK_SCALE[key]}"]
    argv += ["--set", f"sweep.kind={args.kind}"]
    for item in args.set:
        argv += ["--set", item]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
