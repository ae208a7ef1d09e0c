"""Rollouts, score summaries, classification metrics, and report emission.

``rollout`` plays one episode greedily (argmax logits, batch norm in
inference mode). ``evaluate`` runs n seeded rollouts; internally they step
in lockstep as one forward batch, which is exact because inference-mode
forwards are per-sample independent. Random-gate draws come from one stream
per rollout seed, so gate traces never depend on batch composition.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import minicatch, models, nn
from .nn import rng as rngmod
from .stats import WelchResult, welch_t_test_from_stats

REPORT_VERSION = 1


@dataclass
class GateTraceEntry:
    frame: int
    gate: int
    phase: str


@dataclass
class RolloutRecord:
    seed: int
    score: float
    trace: list[GateTraceEntry]


@dataclass
class ScoreSummary:
    n: int
    mean: float
    std: float
    scores: list[float]
    std_defined: bool = True

    @staticmethod
    def from_scores(scores: list[float]) -> "ScoreSummary":
        arr = np.asarray(scores, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("no scores")
        if arr.size == 1:
            return ScoreSummary(1, float(arr[0]), 0.0, list(map(float, arr)), std_defined=False)
        return ScoreSummary(
            n=int(arr.size),
            mean=float(arr.mean()),
            std=float(arr.std(ddof=1)),
            scores=list(map(float, arr)),
        )

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "std": self.std,
                "std_defined": self.std_defined}


@dataclass
class ConditionResult:
    name: str
    gate_policy: str
    summary: ScoreSummary
    gaze_usage_fraction: float
    rollouts: list[RolloutRecord] = field(default_factory=list)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    binary_f1: float
    confusion: list[list[int]]
    gaze_usage: float | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "binary_f1": self.binary_f1,
            "gaze_usage": self.gaze_usage,
            "confusion": self.confusion,
        }


class CheckpointEnvMismatch(ValueError):
    pass


def _as_params(policy_source) -> models.SEAParams:
    from . import training

    if isinstance(policy_source, models.SEAParams):
        return policy_source
    if isinstance(policy_source, training.Checkpoint):
        return training.sea_params_from_checkpoint(policy_source)
    raise TypeError(f"cannot evaluate a {type(policy_source).__name__}")


def _check_compat(params: models.SEAParams) -> None:
    if params.action_count != minicatch.ACTION_COUNT:
        raise CheckpointEnvMismatch(
            f"checkpoint predicts {params.action_count} actions, "
            f"environment has {minicatch.ACTION_COUNT}"
        )


class _LockstepRunner:
    """n environments stepped together; the policy forward runs batched."""

    def __init__(self, params: models.SEAParams, env_cfg: minicatch.EnvConfig,
                 gate_policy: str, seeds: list[int], max_steps: int | None):
        self.params = params
        self.gate_policy = gate_policy
        self.seeds = seeds
        cfg = env_cfg if max_steps is None else dataclasses.replace(env_cfg, max_steps=max_steps)
        self.envs = [minicatch.MiniCatchEnv(dataclasses.replace(cfg, seed=seed))
                     for seed in seeds]
        self.gate_rngs = [rngmod.stream(seed, "gate-random-eval") for seed in seeds]

    def run(self) -> list[RolloutRecord]:
        params = self.params
        models.set_mode(params, "inference")
        n = len(self.envs)
        states = [env.reset() for env in self.envs]
        stacks = np.zeros((n, minicatch.FRAME, minicatch.FRAME), dtype=np.float32)
        histories = [None] * n
        for i, s in enumerate(states):
            frame = minicatch.render(s)
            histories[i] = np.repeat(frame[None], 4, axis=0)
        alive = list(range(n))
        scores = [0.0] * n
        traces: list[list[GateTraceEntry]] = [[] for _ in range(n)]
        frame_idx = [0] * n
        with nn.no_grad():
            while alive:
                batch = np.stack([histories[i] for i in alive])
                emb, act = models.gaze_net_batch(nn.Tensor(batch), params.gaze)
                q = nn.softmax2d(act)
                masked = models.masked_gaze_batch(q, params.keep_fraction)
                pooled = nn.mean(emb, axes=(2, 3))
                if self.gate_policy == "random":
                    c_np = np.array(
                        [[float(self.gate_rngs[i].integers(0, 2))] for i in alive],
                        dtype=np.float32,
                    )
                    c = nn.Tensor(c_np)
                else:
                    _, c = models.gate_batch(pooled, self.gate_policy, params.gate, None)
                logits = models.action_net_batch(emb, masked, c, params.action)
                actions = np.argmax(logits.data, axis=1)
                next_alive = []
                for row, i in enumerate(alive):
                    traces[i].append(GateTraceEntry(
                        frame=frame_idx[i],
                        gate=int(c.data[row, 0]),
                        phase=states[i].phase,
                    ))
                    state, reward, done = self.envs[i].step(states[i], int(actions[row]))
                    states[i] = state
                    scores[i] += reward
                    frame_idx[i] += 1
                    if not done:
                        new_frame = minicatch.render(state)
                        histories[i] = np.concatenate(
                            [histories[i][1:], new_frame[None]], axis=0)
                        next_alive.append(i)
                alive = next_alive
        return [RolloutRecord(seed=self.seeds[i], score=scores[i], trace=traces[i])
                for i in range(n)]


def rollout(policy_source, env_cfg: minicatch.EnvConfig, gate_policy: str,
            seed: int, max_steps: int | None = None) -> tuple[float, list[GateTraceEntry]]:
    """One greedy episode; returns (score, per-frame gate trace)."""
    params = _as_params(policy_source)
    _check_compat(params)
    if gate_policy not in models.GATE_POLICIES:
        raise ValueError(f"unknown gate policy {gate_policy!r}")
    rec = _LockstepRunner(params, env_cfg, gate_policy, [seed], max_steps).run()[0]
    return rec.score, rec.trace


def evaluate(policy_source, env_cfg: minicatch.EnvConfig, gate_policy: str,
             n: int = 30, base_seed: int = 1000,
             max_steps: int | None = None, threads: int = 1,
             name: str | None = None) -> ConditionResult:
    """n seeded rollouts (seeds base_seed .. base_seed+n-1) -> ConditionResult."""
    params = _as_params(policy_source)
    _check_compat(params)
    if gate_policy not in models.GATE_POLICIES:
        raise ValueError(f"unknown gate policy {gate_policy!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = [base_seed + i for i in range(n)]
    if threads <= 1 or n == 1:
        records = _LockstepRunner(params, env_cfg, gate_policy, seeds, max_steps).run()
    else:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.asarray(seeds), min(threads, n))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _LockstepRunner(params, env_cfg, gate_policy,
                                    [int(s) for s in chunk], max_steps).run)
                for chunk in chunks if len(chunk)
            ]
            records = [rec for f in futures for rec in f.result()]
    summary = ScoreSummary.from_scores([r.score for r in records])
    usage = gaze_usage([e for r in records for e in r.trace])
    return ConditionResult(
        name=name or gate_policy,
        gate_policy=gate_policy,
        summary=summary,
        gaze_usage_fraction=usage,
        rollouts=records,
    )


def welch_t_test(a: ScoreSummary, b: ScoreSummary) -> WelchResult:
    """Two-sided Welch's t-test between two score summaries."""
    return welch_t_test_from_stats(a.mean, a.std, a.n, b.mean, b.std, b.n)


def gaze_usage(trace: list[GateTraceEntry]) -> float:
    """Fraction of frames with the gate open."""
    if not trace:
        return 0.0
    return float(np.mean([e.gate for e in trace]))


def classification_metrics(preds, truth, no_action_id: int = 0) -> MetricsReport:
    """Accuracy, macro F1 (zero-support classes excluded), action-vs-no-action F1."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ValueError("preds and truth must be equal-length 1-d label arrays")
    if preds.size == 0:
        raise ValueError("empty label arrays")
    n_classes = int(max(preds.max(), truth.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    accuracy = float((preds == truth).mean())

    def f1_for(tp, fp, fn):
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom > 0 else 0.0

    per_class = []
    for k in range(n_classes):
        support = confusion[k].sum()
        if support == 0:
            continue
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = support - tp
        per_class.append(f1_for(tp, fp, fn))
    macro_f1 = float(np.mean(per_class)) if per_class else 0.0

    bin_truth = (truth != no_action_id).astype(np.int64)
    bin_preds = (preds != no_action_id).astype(np.int64)
    tp = int(((bin_preds == 1) & (bin_truth == 1)).sum())
    fp = int(((bin_preds == 1) & (bin_truth == 0)).sum())
    fn = int(((bin_preds == 0) & (bin_truth == 1)).sum())
    binary_f1 = float(f1_for(tp, fp, fn))
    return MetricsReport(
        accuracy=accuracy,
        macro_f1=macro_f1,
        binary_f1=binary_f1,
        confusion=confusion.tolist(),
    )


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def report_dict(conditions: list[ConditionResult],
                comparisons: list[tuple[str, str, WelchResult]],
                classification: MetricsReport | None,
                config_hash: str) -> dict:
    return {
        "version": REPORT_VERSION,
        "config_hash": config_hash,
        "conditions": [
            {
                "name": c.name,
                "gate_policy": c.gate_policy,
                "summary": c.summary.to_dict(),
                "gaze_usage": c.gaze_usage_fraction,
            }
            for c in conditions
        ],
        "comparisons": [
            {"a": a, "b": b, "t": r.t, "df": r.df, "p": r.p} for a, b, r in comparisons
        ],
        "classification": classification.to_dict() if classification else None,
    }


def emit_report(conditions: list[ConditionResult],
                comparisons: list[tuple[str, str, WelchResult]],
                classification: MetricsReport | None,
                out_dir: Path, config_hash: str = "") -> dict[str, Path]:
    """Write report.json, scores.csv, gate_trace.csv; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = report_dict(conditions, comparisons, classification, config_hash)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

    scores_path = out_dir / "scores.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "rollout", "seed", "score"])
    for c in conditions:
        for k, rec in enumerate(c.rollouts):
            w.writerow([c.name, k, rec.seed, f"{rec.score:g}"])
    scores_path.write_text(buf.getvalue())

    trace_path = out_dir / "gate_trace.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "rollout", "frame", "gate", "phase"])
    for c in conditions:
        for k, rec in enumerate(c.rollouts):
            for e in rec.trace:
                w.writerow([c.name, k, e.frame, e.gate, e.phase])
    trace_path.write_text(buf.getvalue())
    return {"report": report_path, "scores": scores_path, "gate_trace": trace_path}
