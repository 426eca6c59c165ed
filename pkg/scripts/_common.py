import argparse
import logging
from pathlib import Path


def parser(description: str, seeds: int = 5) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, default=seeds)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args) -> Path:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out
