"""Regenerate the frozen long-run NNLS reference objectives.

Solves every deterministic test instance with the straight-line proximal
gradient reference (up to 1e6 iterations, exact 1/L step) and writes the
objective values to tests/fixtures/nnls_reference.json. The acceptance
suite rebuilds the same instances from their indices and compares the
package solver against these frozen values, so this script only needs to
run again if the instance generator changes.

Usage: python scripts/make_nnls_reference.py
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from helpers import make_nnls_instance, ref_nnls_longrun  # noqa: E402

COUNT = 200
ITERS = 1_000_000


def main() -> int:
    entries = []
    start = time.time()
    for index in range(COUNT):
        anchor, neighbors, alpha = make_nnls_instance(index)
        _, objective = ref_nnls_longrun(anchor, neighbors, alpha, iters=ITERS)
        entries.append({
            "index": index,
            "k1": int(neighbors.shape[0]),
            "dz": int(neighbors.shape[1]),
            "alpha": alpha,
            "objective": objective,
        })
        if (index + 1) % 25 == 0:
            print(f"{index + 1}/{COUNT} [{time.time() - start:.0f}s]", flush=True)
    out = ROOT / "tests" / "fixtures" / "nnls_reference.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": "helpers.make_nnls_instance",
        "solver": "helpers.ref_nnls_longrun",
        "iters": ITERS,
        "count": COUNT,
        "entries": entries,
    }
    out.write_text(json.dumps(payload, indent=1) + "\n")
    print(f"wrote {out} [{time.time() - start:.0f}s]")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
