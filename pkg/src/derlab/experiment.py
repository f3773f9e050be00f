"""Full incremental run: expand, train, prune, rehearse, retrain, evaluate."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, with_seed  # noqa: F401  (re-exported)
from .dermodel import DERModel, expand, extract_features, finish_extractor
from .errors import DerlabError
from .memory import ExemplarMemory, rebalance
from .metrics import (AccuracyMatrix, avg_incremental_accuracy, bwt, fresh_baseline, fwt,
                      head_scores, ideal_boundary_probe, restricted_accuracy)
from .protocol import Dataset, generate_synthetic, load_dataset, make_splits
from .trainer import stream, train_classifier, train_representation

log = logging.getLogger(__name__)

# generator keys, one per purpose within a step
_INIT, _SHUFFLE, _STAGE2, _PROBE, _BASELINE = range(5)


class ExperimentError(DerlabError, RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step


@dataclass
class ResultBundle:
    config: dict
    config_hash: str
    steps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    matrix: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    deployed: AccuracyMatrix = field(default_factory=AccuracyMatrix)

    def to_json(self) -> str:
        doc = {"config": self.config, "config_hash": self.config_hash,
               "steps": self.steps, "summary": self.summary}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "acc", "params", "a_matrix_row"])
        for row in self.steps:
            w.writerow([row["step"], repr(row["acc"]), row["params"],
                        ";".join(repr(v) for v in row["probe_row"] or row["deployed_row"])])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(self.to_json())
        (out / "results.csv").write_text(self.to_csv())
        return out / "results.json"


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "synthetic":
        return generate_synthetic(d.classes, d.per_class_train, d.per_class_test, d.dim,
                                  d.spread, d.seed, d.shape)
    train = load_dataset(d.train_path, "train")
    test = load_dataset(d.test_path, "test") if d.test_path else train
    return train, test


def evaluate(model: DERModel, test: Dataset, groups) -> dict:
    """Deployed-classifier accuracy on all seen classes plus the restricted
    accuracy on every group seen so far."""
    idx = test.indices_of(model.classes)
    feats = extract_features(model, test.x[idx])
    scores = head_scores(model.classifier, feats)
    y = test.y[idx]
    return {
        "acc": restricted_accuracy(scores, y, model.classes),
        "rows": [restricted_accuracy(scores, y, model.classes, g) for g in groups],
    }


def run_experiment(config: ExperimentConfig, datasets=None, out_dir=None) -> ResultBundle:
    """Run every step of the protocol and collect the metrics.

    ``out_dir`` (default ``config.output.dir``) receives per-step
    checkpoints when ``config.output.checkpoints`` is set.
    """
    train, test = datasets if datasets is not None else load_datasets(config)
    p = config.protocol
    plan = make_splits(train.class_count, p.base, p.steps, p.order_seed)
    tc = config.train
    seed = tc.seed
    der = tc.method == "der"
    specs = list(config.blocks)
    if not (der and tc.prune):
        specs = [replace(s, masked=False) for s in specs]
    out_dir = out_dir if out_dir is not None else config.output.dir
    ckpt_dir = Path(out_dir) / "checkpoints" if (out_dir and config.output.checkpoints) else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    model = DERModel(train.sample_shape, tc.s_max, expandable=der)
    memory = ExemplarMemory(config.memory.mode, config.memory.size)
    bundle = ResultBundle(config.to_dict(), config.hash())
    groups = plan.groups()

    for t, group in enumerate(groups, 1):
        try:
            row = _run_step(t, group, groups[:t], model, memory, train, test, config, specs,
                            bundle, seed)
        except DerlabError as exc:
            raise ExperimentError(t, exc) from exc
        memory = row.pop("_memory")
        bundle.steps.append(row)
        log.info("step %d: acc %.4f params %d", t, row["acc"], row["params"])
        if ckpt_dir is not None:
            records = {"steps": bundle.steps}
            save_checkpoint(ckpt_dir / f"step{t:02d}.derc", model, memory, records,
                            bundle.config_hash)

    accs = [r["acc"] for r in bundle.steps]
    s = {
        "avg": avg_incremental_accuracy(accs),
        "last": accs[-1],
        "mean_params": float(np.mean([r["params"] for r in bundle.steps])),
        "steps": len(accs),
    }
    if len(accs) >= 2:
        s["bwt_deployed"] = bwt(bundle.deployed)
        if config.eval.probe:
            s["bwt"] = bwt(bundle.matrix)
        if config.eval.fwt and config.eval.probe:
            s["fwt"] = fwt(bundle.matrix)
    bundle.summary = s
    if out_dir:
        bundle.write(out_dir)
    return bundle


def _run_step(t, group, seen_groups, model, memory, train, test, config, specs, bundle, seed):
    tc = config.train
    expand(model, specs, group, stream(seed, t, _INIT))
    new_idx = train.indices_of(group)
    if tc.method == "joint":
        idx = train.indices_of(model.classes)
    else:
        idx = np.concatenate([new_idx, memory.indices()]).astype(np.int64)

    baseline = None
    if config.eval.fwt and t >= 2:
        baseline = fresh_baseline(tc, config.blocks, train.sample_shape, model.classes,
                                  train.x[idx], train.y[idx], test.x, test.y, group,
                                  stream(seed, t, _BASELINE))

    train_representation(model, train.x[idx], train.y[idx], tc, stream(seed, t, _SHUFFLE))
    if model.expandable:
        finish_extractor(model)

    if tc.method != "joint":
        feats = {c: (ids, extract_features(model, train.x[ids]))
                 for c in group for ids in [train.indices_of([c])]}
        memory = rebalance(memory, feats)
        train_classifier(model, memory, train.x, train.y, tc, stream(seed, t, _STAGE2))

    ev = evaluate(model, test, seen_groups)
    for j, v in enumerate(ev["rows"], 1):
        bundle.deployed.set(t, j, v)

    probe_row = []
    if config.eval.probe:
        seen = train.indices_of(model.classes)
        head = ideal_boundary_probe(model, train.x[seen], train.y[seen], tc,
                                    stream(seed, t, _PROBE))
        tidx = test.indices_of(model.classes)
        scores = head_scores(head, extract_features(model, test.x[tidx]))
        for j, g in enumerate(seen_groups, 1):
            v = restricted_accuracy(scores, test.y[tidx], model.classes, g)
            bundle.matrix.set(t, j, v)
            probe_row.append(v)
        if baseline is not None:
            bundle.matrix.baseline[t] = baseline
    if baseline is not None:
        bundle.deployed.baseline[t] = baseline

    return {
        "step": t,
        "classes": list(group),
        "n_classes": len(model.classes),
        "acc": ev["acc"],
        "params": model.param_count(),
        "segment_dims": model.segment_dims,
        "deployed_row": ev["rows"],
        "probe_row": probe_row,
        "baseline": baseline,
        "memory_size": memory.total(),
        "_memory": memory,
    }
