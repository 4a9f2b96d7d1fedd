"""Regenerate the evaluation regression fixture.

Run from the repository root: ``python tests/data/make_golden.py``.  Only
needed when the report format changes on purpose.
"""

import json
from pathlib import Path

from clusterloc.ann import build_index
from clusterloc.bench import evaluate
from clusterloc.pipeline import dumps_record, localize, pose_record
from clusterloc.synth import SynthConfig, generate_world, save_world

HERE = Path(__file__).parent / "golden"
CFG = SynthConfig(num_points=400, num_model_images=16, num_query_images=4, descriptor_dim=16,
                  descriptor_noise_sigma=0.05, pixel_noise_sigma=0.5, distractor_feature_fraction=0.2, seed=11)


def fixed_timing(rec):
    rec = dict(rec)
    rec["timing"] = {k: 0.001 for k in rec["timing"]}
    return rec


def main():
    world = generate_world(CFG)
    save_world(world, HERE / "world")
    index = build_index(world.model)
    locs = [localize(q, world.model, index) for q in world.queries]
    records = [fixed_timing(pose_record(l)) for l in locs]
    (HERE / "results.jsonl").write_text("".join(dumps_record(r) + "\n" for r in records))
    (HERE / "traces.jsonl").write_text("".join(l.trace.to_json() + "\n" for l in locs))
    report = evaluate(records, world, [l.trace for l in locs])
    (HERE / "report.json").write_text(report.to_json())
    (HERE / "report.txt").write_text(report.to_text())


if __name__ == "__main__":
    main()
