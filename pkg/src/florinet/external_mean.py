"""Reference external aggregator: plain federated averaging.

Consumes the file-based manifest contract and reproduces the built-in mean
strategy bit for bit.  Run as::

    python -m florinet.external_mean manifest.json
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from . import codec


def aggregate_from_manifest(manifest_path: str) -> None:
    manifest = json.loads(Path(manifest_path).read_text())
    current = codec.decode_payload(Path(manifest["model_path"]).read_bytes())
    total = np.zeros_like(current)
    count = 0
    for entry in manifest["interims"]:
        total += codec.decode_payload(Path(entry["path"]).read_bytes())
        count += int(entry["count"])
    if count == 0:
        raise SystemExit("no contributors")
    new_model = current + total / count
    Path(manifest["output_path"]).write_bytes(codec.encode_payload(new_model))


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m florinet.external_mean MANIFEST", file=sys.stderr)
        return 2
    aggregate_from_manifest(argv[0])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
