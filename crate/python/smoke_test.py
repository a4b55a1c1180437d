"""Smoke test for the voxflow Python module.

Build first with `maturin develop -m crates/py/Cargo.toml` (or
`pip install --no-build-isolation ./crates/py`), then run this script.
"""

import json
import math
from pathlib import Path

import voxflow

ASSETS = Path(__file__).resolve().parent.parent / "assets"


def main():
    model = voxflow.Model.load(str(ASSETS / "models" / "toy_residual.json"))
    device = voxflow.Device.load(str(ASSETS / "devices" / "zc706.json"))
    assert len(model) == len(model.layers) > 0
    assert model.workload_gops > 0.0
    print(model, device)

    problem = voxflow.Problem(model, device, batch=20)
    start = problem.minimal_design()
    assert start.num_partitions == 1

    best = problem.anneal(seed=3, max_iterations=400)
    assert best.feasible
    assert best.throughput_gops >= start.throughput_gops
    assert math.isclose(best.clips_per_s * model.workload_gops, best.throughput_gops, rel_tol=1e-12)
    print(best)

    again = problem.evaluate(best.design_json())
    assert again.throughput_gops == best.throughput_gops
    report = json.loads(again.report_json())
    assert report["gops_per_s"] == best.throughput_gops
    assert best.trace_csv().startswith("iteration,")
    for p in best.partitions():
        print("  ", p)

    try:
        voxflow.Model.from_json('{"name": "x", "layers": [{"id": "a", "kind": "Softmax"}]}')
    except voxflow.VoxflowError as e:
        print("rejected unknown layer kind:", e)
    else:
        raise AssertionError("unknown layer kind accepted")

    rows, geomean = voxflow.validate_suite(batch=100)
    assert len(rows) == 4 and geomean < 0.05
    for r in rows:
        print("   {class:<13} error {error:.4f}".format(**r))
    print("ok")


if __name__ == "__main__":
    main()
