"""
compare_runs.py

Compare two output directories byte for byte: every file present in either directory
must exist in both with identical content. Used to check that a rerun with the same
config and seed reproduces its outputs.

Usage:
  python scripts/compare_runs.py out_a out_b
  python scripts/compare_runs.py out_a out_b --ignore run.log --verbose

Flags:
  --ignore NAME  File name to skip (repeatable). run.log, crash.log and
                 native_crash.log are always skipped.
  --verbose      List every compared file.

Exit codes:
  0 identical
  1 differences found
  2 a directory does not exist
"""
from __future__ import annotations
import argparse
import filecmp
import os
import sys
from typing import Dict, Iterable, List, Tuple

ALWAYS_IGNORED = ("run.log", "crash.log", "native_crash.log")

# --- Helpers -----------------------------------------------------------------


def _walk(root: str, ignored: Iterable[str]) -> Dict[str, str]:
    """Map of relative path -> absolute path for every regular file under root."""
    skip = set(ignored)
    found = {}
    for base, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            if name in skip or name.endswith(".tmp"):
                continue
            full = os.path.join(base, name)
            found[os.path.relpath(full, root).replace(os.sep, "/")] = full
    return found


def compare_dirs(left: str, right: str, ignored: Iterable[str] = ()) -> Tuple[List[str], List[str], List[str], List[str]]:
    """Return (only_left, only_right, differing, identical) relative paths, each sorted."""
    ignored = tuple(ignored) + ALWAYS_IGNORED
    a = _walk(left, ignored)
    b = _walk(right, ignored)
    only_left = sorted(set(a) - set(b))
    only_right = sorted(set(b) - set(a))
    differing, identical = [], []
    for rel in sorted(set(a) & set(b)):
        if filecmp.cmp(a[rel], b[rel], shallow=False):
            identical.append(rel)
        else:
            differing.append(rel)
    return only_left, only_right, differing, identical


# --- Main ---------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(description="Byte-for-byte comparison of two run output directories.")
    parser.add_argument("left", help="First output directory")
    parser.add_argument("right", help="Second output directory")
    parser.add_argument("--ignore", action="append", default=[], help="File name to skip (repeatable)")
    parser.add_argument("--verbose", action="store_true", help="List every compared file")
    args = parser.parse_args(argv)

    for d in (args.left, args.right):
        if not os.path.isdir(d):
            print(f"Error: directory '{d}' not found", file=sys.stderr)
            return 2

    only_left, only_right, differing, identical = compare_dirs(args.left, args.right, args.ignore)
    if args.verbose:
        for rel in identical:
            print(f"  same  {rel}")
    for rel in only_left:
        print(f"only in {args.left}: {rel}")
    for rel in only_right:
        print(f"only in {args.right}: {rel}")
    for rel in differing:
        print(f"differs: {rel}")
    if only_left or only_right or differing:
        print(f"{len(differing)} differing, {len(only_left) + len(only_right)} unmatched, {len(identical)} identical")
        return 1
    print(f"Identical ({len(identical)} files).")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
