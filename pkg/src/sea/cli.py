"""Command-line entry point.

Subcommands: generate-data, train-gaze, train-action, evaluate, compare,
report. Flags are long-form only; trailing positional ``key=value`` pairs
override config-file fields, and the dedicated flags (--seed, --gate-policy,
--rollouts) are applied last. Every output directory receives a
``resolved_config.json`` sufficient to reproduce the artifact. Logs go to
stderr; machine-readable results go to files.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from . import data as datamod
from . import evaluation, minicatch, models, training
from .stats import WelchResult

CONDITION_ORDER = ("learned", "off", "on", "random")
POLICY_FLAG_VALUES = {"learned": "learned", "on": "on", "off": "off", "random": "random"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GenerateConfig:
    seed: int = 0
    max_steps: int = 600
    ball_speed: int = 1
    paddle_speed: int = 1
    gaze_noise_px: float = 2.0
    distractor: bool = True
    n_trials: int = 20

    def env_config(self) -> minicatch.EnvConfig:
        d = dataclasses.asdict(self)
        d.pop("n_trials")
        return minicatch.EnvConfig(**d)


@dataclasses.dataclass
class EvalConfig:
    seed: int = 1000  # base rollout seed
    rollouts: int = 30
    max_steps: int = 600
    ball_speed: int = 1
    paddle_speed: int = 1
    gaze_noise_px: float = 2.0
    distractor: bool = True

    def env_config(self) -> minicatch.EnvConfig:
        return minicatch.EnvConfig(
            seed=0,
            max_steps=self.max_steps,
            ball_speed=self.ball_speed,
            paddle_speed=self.paddle_speed,
            gaze_noise_px=self.gaze_noise_px,
            distractor=self.distractor,
        )


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _read_config_file(path: Path) -> dict:
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(text)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise training.ConfigError(f"{path} line {lineno}: expected key=value")
        key, _, raw = line.partition("=")
        values[key.strip()] = _parse_value(raw.strip())
    return values


def resolve_config(cls, file: str | None, overrides: list[str]):
    """Config-file values overridden by key=value pairs; unknown keys rejected."""
    field_names = {f.name for f in dataclasses.fields(cls)}
    values: dict = {}
    if file:
        p = Path(file)
        if not p.exists():
            raise training.ConfigError(f"config file not found: {p}")
        values.update(_read_config_file(p))
    for item in overrides:
        if "=" not in item:
            raise training.ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        values[key.strip()] = _parse_value(raw.strip())
    unknown = set(values) - field_names
    if unknown:
        raise training.ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise training.ConfigError(str(e)) from None


def _apply_data_dir_default(cfg: training.TrainConfig) -> training.TrainConfig:
    if not cfg.data_dir:
        root = os.environ.get("SEA_DATA_DIR", "")
        if not root:
            raise training.ConfigError(
                "no data_dir in config and SEA_DATA_DIR is not set"
            )
        return dataclasses.replace(cfg, data_dir=root)
    return cfg


def _config_hash(resolved: dict) -> str:
    return hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()
    ).hexdigest()


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": resolved}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n"
    )
    return doc


def _write_training_log(out_dir: Path, metrics: list[dict]) -> None:
    if not metrics:
        return
    cols = list(metrics[0].keys())
    lines = [",".join(cols)]
    for row in metrics:
        lines.append(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    (out_dir / "training_log.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate_data(args) -> int:
    cfg = resolve_config(GenerateConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    _write_resolved(out, "generate-data", dataclasses.asdict(cfg))
    minicatch.generate_dataset(cfg.env_config(), n_trials=cfg.n_trials, out_dir=out)
    _log(f"[generate-data] wrote {cfg.n_trials} trials to {out}")
    return 0


def _split_from_config(cfg: training.TrainConfig):
    dirs = datamod.discover_trials(Path(cfg.data_dir))
    return datamod.split_trials(dirs, cfg.train_trials, cfg.val_trials, seed=cfg.seed)


def _cmd_train_gaze(args) -> int:
    cfg = resolve_config(training.TrainConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg = _apply_data_dir_default(cfg)
    out = Path(args.out)
    _write_resolved(out, "train-gaze", cfg.to_dict())
    train_dirs, val_dirs = _split_from_config(cfg)
    ckpt = training.train_gaze(train_dirs, val_dirs, cfg)
    path = out / f"gaze{training.CHECKPOINT_SUFFIX}"
    training.save_checkpoint(ckpt, path)
    _write_training_log(out, ckpt.metrics)
    _log(f"[train-gaze] checkpoint: {path}")
    return 0


def _cmd_train_action(args) -> int:
    cfg = resolve_config(training.TrainConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.gate_policy is not None:
        cfg = dataclasses.replace(cfg, gate_policy=POLICY_FLAG_VALUES[args.gate_policy])
    cfg = _apply_data_dir_default(cfg)
    gaze_path = Path(args.gaze_checkpoint)
    if not gaze_path.exists():
        raise training.CheckpointError(f"gaze checkpoint not found: {gaze_path}")
    out = Path(args.out)
    _write_resolved(out, "train-action", cfg.to_dict())
    gaze_ckpt = training.load_checkpoint(gaze_path)
    train_dirs, val_dirs = _split_from_config(cfg)
    ckpt = training.train_action(train_dirs, val_dirs, gaze_ckpt, cfg)
    path = out / f"sea{training.CHECKPOINT_SUFFIX}"
    training.save_checkpoint(ckpt, path)
    _write_training_log(out, ckpt.metrics)
    _log(f"[train-action] checkpoint: {path}")
    return 0


def _load_sea_checkpoint(path_str: str) -> training.Checkpoint:
    path = Path(path_str)
    if not path.exists():
        raise training.CheckpointError(f"checkpoint not found: {path}")
    return training.load_checkpoint(path)


def _classification_on_val(ckpt: training.Checkpoint, overrides: list[str]):
    """Held-out classification metrics using the checkpoint's own config."""
    cfg = training.TrainConfig.from_dict(
        {k: v for k, v in ckpt.config.items() if k in training.TrainConfig.field_names()}
    )
    for item in overrides:
        key, _, raw = item.partition("=")
        if key.strip() == "data_dir":
            cfg = dataclasses.replace(cfg, data_dir=str(_parse_value(raw.strip())))
    params = training.sea_params_from_checkpoint(ckpt)
    _, val_dirs = _split_from_config(cfg)
    val = training.load_trials(val_dirs, cfg)
    import numpy as np

    from . import nn

    models.set_mode(params, "inference")
    preds, truth, gates = [], [], []
    with nn.no_grad():
        for lt in val:
            idx = np.arange(len(lt.trial.steps))
            for lo in range(0, len(idx), 256):
                rows = idx[lo : lo + 256]
                stacks = datamod.stack_batch(lt.frames, rows)
                out = models.sea_forward_batch(stacks, params, "learned")
                preds.extend(np.argmax(out["logits"].data, axis=1).tolist())
                gates.extend(out["c"].data.ravel().tolist())
            truth.extend(lt.actions.tolist())
    report = evaluation.classification_metrics(preds, truth,
                                               no_action_id=minicatch.NO_ACTION_ID)
    report.gaze_usage = float(np.mean(gates)) if gates else None
    return report


def _raw_results_doc(config_hash: str, conditions, comparisons, classification) -> dict:
    return {
        "version": evaluation.REPORT_VERSION,
        "config_hash": config_hash,
        "conditions": [
            {
                "name": c.name,
                "gate_policy": c.gate_policy,
                "summary": c.summary.to_dict(),
                "gaze_usage": c.gaze_usage_fraction,
                "rollouts": [
                    {
                        "seed": r.seed,
                        "score": r.score,
                        "trace": [[e.frame, e.gate, e.phase] for e in r.trace],
                    }
                    for r in c.rollouts
                ],
            }
            for c in conditions
        ],
        "comparisons": [
            {"a": a, "b": b, "t": r.t, "df": r.df, "p": r.p} for a, b, r in comparisons
        ],
        "classification": classification.to_dict() if classification else None,
    }


def _conditions_from_raw(doc: dict):
    conditions = []
    for c in doc["conditions"]:
        rollouts = [
            evaluation.RolloutRecord(
                seed=r["seed"],
                score=r["score"],
                trace=[evaluation.GateTraceEntry(frame=f, gate=g, phase=p)
                       for f, g, p in r["trace"]],
            )
            for r in c["rollouts"]
        ]
        summary = evaluation.ScoreSummary(
            n=c["summary"]["n"], mean=c["summary"]["mean"], std=c["summary"]["std"],
            scores=[r.score for r in rollouts],
            std_defined=c["summary"].get("std_defined", True),
        )
        conditions.append(evaluation.ConditionResult(
            name=c["name"], gate_policy=c["gate_policy"], summary=summary,
            gaze_usage_fraction=c["gaze_usage"], rollouts=rollouts,
        ))
    comparisons = [
        (e["a"], e["b"], WelchResult(t=e["t"], df=e["df"], p=e["p"]))
        for e in doc["comparisons"]
    ]
    classification = None
    if doc.get("classification"):
        cl = doc["classification"]
        classification = evaluation.MetricsReport(
            accuracy=cl["accuracy"], macro_f1=cl["macro_f1"], binary_f1=cl["binary_f1"],
            confusion=cl["confusion"], gaze_usage=cl.get("gaze_usage"),
        )
    return conditions, comparisons, classification


def _cmd_evaluate(args) -> int:
    cfg = resolve_config(EvalConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.rollouts is not None:
        cfg = dataclasses.replace(cfg, rollouts=args.rollouts)
    ckpt = _load_sea_checkpoint(args.checkpoint)
    policy = POLICY_FLAG_VALUES[args.gate_policy or "learned"]
    out = Path(args.out)
    resolved = dataclasses.asdict(cfg)
    resolved.update({"gate_policy": policy, "checkpoint": str(args.checkpoint),
                     "threads": args.threads})
    doc = _write_resolved(out, "evaluate", resolved)
    chash = _config_hash(doc)
    cond = evaluation.evaluate(
        ckpt, cfg.env_config(), policy, n=cfg.rollouts, base_seed=cfg.seed,
        threads=args.threads,
    )
    raw = _raw_results_doc(chash, [cond], [], None)
    (out / "raw_results.json").write_text(json.dumps(raw, indent=1, sort_keys=True) + "\n")
    evaluation.emit_report([cond], [], None, out, config_hash=chash)
    _log(f"[evaluate] {policy}: mean={cond.summary.mean:.3f} std={cond.summary.std:.3f} "
         f"gaze_usage={cond.gaze_usage_fraction:.3f} over {cond.summary.n} rollouts")
    return 0


def _cmd_compare(args) -> int:
    cfg = resolve_config(EvalConfig, args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.rollouts is not None:
        cfg = dataclasses.replace(cfg, rollouts=args.rollouts)
    ckpt = _load_sea_checkpoint(args.checkpoint)
    out = Path(args.out)
    resolved = dataclasses.asdict(cfg)
    resolved.update({"checkpoint": str(args.checkpoint), "threads": args.threads,
                     "conditions": list(CONDITION_ORDER)})
    doc = _write_resolved(out, "compare", resolved)
    chash = _config_hash(doc)
    conditions = []
    for policy in CONDITION_ORDER:
        cond = evaluation.evaluate(
            ckpt, cfg.env_config(), policy, n=cfg.rollouts, base_seed=cfg.seed,
            threads=args.threads,
        )
        _log(f"[compare] {policy}: mean={cond.summary.mean:.3f} "
             f"std={cond.summary.std:.3f} usage={cond.gaze_usage_fraction:.3f}")
        conditions.append(cond)
    learned = conditions[0]
    comparisons = [
        (learned.name, other.name, evaluation.welch_t_test(learned.summary, other.summary))
        for other in conditions[1:]
    ]
    classification = _classification_on_val(ckpt, args.overrides)
    raw = _raw_results_doc(chash, conditions, comparisons, classification)
    (out / "raw_results.json").write_text(json.dumps(raw, indent=1, sort_keys=True) + "\n")
    evaluation.emit_report(conditions, comparisons, classification, out, config_hash=chash)
    for a, b, r in comparisons:
        _log(f"[compare] {a} vs {b}: t={r.t:.3f} df={r.df:.1f} p={r.p:.4g}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    raw_path = out / "raw_results.json"
    if not raw_path.exists():
        raise training.ConfigError(f"no raw_results.json under {out}")
    doc = json.loads(raw_path.read_text())
    conditions, comparisons, classification = _conditions_from_raw(doc)
    evaluation.emit_report(conditions, comparisons, classification, out,
                           config_hash=doc.get("config_hash", ""))
    _log(f"[report] re-rendered report files in {out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="sea", description=__doc__.splitlines()[0] if __doc__ else "")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def common(p, *, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", default=None, help="JSON or key=value config file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config field overrides")

    p = sub.add_parser("generate-data", help="roll the scripted demonstrator into a dataset")
    common(p)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train-gaze", help="train the gaze prediction network")
    common(p)
    p.set_defaults(func=_cmd_train_gaze)

    p = sub.add_parser("train-action", help="train gate + action networks")
    common(p)
    p.add_argument("--gaze-checkpoint", required=True, help="gaze checkpoint path")
    p.add_argument("--gate-policy", choices=sorted(POLICY_FLAG_VALUES), default=None)
    p.set_defaults(func=_cmd_train_action)

    p = sub.add_parser("evaluate", help="seeded rollouts for one gate policy")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained sea checkpoint")
    p.add_argument("--gate-policy", choices=sorted(POLICY_FLAG_VALUES), default="learned")
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="evaluate all gate policies with shared seeds")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained sea checkpoint")
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("report", help="re-render report files from stored raw results")
    common(p, config=False, seed=False)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage())
        return args.func(args)
    except UsageError as e:
        _log(str(e))
        return 1
    except (training.ConfigError, training.CheckpointError, datamod.TrialFormatError,
            evaluation.CheckpointEnvMismatch, ValueError) as e:
        _log(f"error: {e}")
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures exit 2
        _log(f"runtime failure: {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
