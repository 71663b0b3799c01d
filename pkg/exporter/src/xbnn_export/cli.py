"""Command line front end: checkpoint + map in, XBM1 file out.

Exit codes: 0 on success, 1 for unusable inputs (bad flags, unreadable
files, malformed map), 2 when a well-formed checkpoint is rejected as
inexpressible on the target.
"""

from __future__ import annotations

import argparse
import sys

from .errors import (
    CheckpointError,
    InvalidCheckpoint,
    KernelTooLarge,
    MapError,
    ShapeMismatch,
    UnsupportedLayer,
)
from .export import export


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def main(argv=None) -> int:
    parser = _Parser(
        prog="xbnn-export",
        description="Convert a trained binary-CNN checkpoint into an XBM1 model file",
    )
    parser.add_argument("--checkpoint", required=True, help="torch state-dict file")
    parser.add_argument("--map", required=True, dest="map_path",
                        help="layer-mapping YAML file")
    parser.add_argument("--out", required=True, help="XBM1 output path")
    args = parser.parse_args(argv)
    try:
        doc = export(args.checkpoint, args.map_path, args.out)
    except (MapError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (UnsupportedLayer, KernelTooLarge, ShapeMismatch, InvalidCheckpoint) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    shape = "x".join(str(v) for v in doc["input_shape"])
    print(f"wrote {args.out}: {len(doc['layers'])} layers, input {shape}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
