"""Command-line pipelines: synth, train, rules, explain, attack, fuse, report."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import attack, kge, rules, scorer, synth
from .kg import Fact, KnowledgeGraph, ParseError, load_dataset, write_dataset

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
METHODS = ("expath", "sparse", "random")
CHECKPOINT_NAME = "model"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    model: kge.ModelConfig = field(default_factory=kge.ModelConfig)
    thresholds: rules.Thresholds = field(default_factory=rules.Thresholds)
    policy: str = "auto"
    k: int = 1
    targets: int = 20
    seed: int = 0
    jobs: int = 0
    out: str = "out"
    method: str = "expath"
    runs: int = 1
    rel_eps: float = 0.0
    exclude_both: bool = False
    use_cp: bool = True
    use_pt: bool = True
    greedy: bool = False
    fallback: str = "none"
    per_target: bool = False
    max_len: int = 3
    path_cap: int = 100_000

    def validate(self) -> None:
        if self.policy not in (*scorer.POLICIES, "auto"):
            raise UsageError(f"unknown policy {self.policy!r}")
        if not 1 <= self.k <= scorer.MAX_K:
            raise UsageError(f"--k must be in 1..{scorer.MAX_K}")
        if self.targets < 1 or self.runs < 1 or self.jobs < 0:
            raise UsageError("--targets and --runs must be positive, --jobs non-negative")
        if self.method not in METHODS and not self.method.startswith("import:"):
            raise UsageError(f"unknown method {self.method!r}")
        if self.fallback not in ("none", "sparse", "random"):
            raise UsageError(f"unknown fallback {self.fallback!r}")
        if not (self.use_cp or self.use_pt):
            raise UsageError("--no-cp and --no-pt together leave no rules; use --method sparse instead")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if "model" in data:
            data["model"] = kge.ModelConfig.from_dict(data["model"])
        if "thresholds" in data:
            data["thresholds"] = rules.Thresholds(**data["thresholds"])
        return cls(**data)

    @property
    def model_config(self) -> kge.ModelConfig:
        return kge.ModelConfig.from_dict({**self.model.to_dict(), "seed": self.seed})

    @property
    def workers(self) -> int:
        return self.jobs or os.cpu_count() or 1


# --- config composition ------------------------------------------------------

_ENV = {"EXPATH_DATA": ("data", str), "EXPATH_SEED": ("seed", int), "EXPATH_JOBS": ("jobs", int), "EXPATH_OUT": ("out", str)}
_MODEL_FLAGS = {
    "model_family": "family",
    "dim": "dim",
    "epochs": "epochs",
    "lr": "lr",
    "neg": "negatives",
    "batch": "batch_size",
    "reg": "reg",
    "margin": "margin",
    "optimizer": "optimizer",
}
_THRESHOLD_FLAGS = {"min_sc": "min_sc", "min_hc": "min_hc", "min_supp": "min_supp"}
_RUN_FLAGS = (
    "data", "policy", "k", "targets", "seed", "jobs", "out", "method", "runs", "rel_eps",
    "exclude_both", "greedy", "fallback", "per_target", "max_len", "path_cap",
)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def compose_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Defaults < --config file < environment < command-line flags."""
    environ = os.environ if environ is None else environ
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_read_json(args.config))
    model = dict(merged.pop("model", {}))
    if getattr(args, "model_cfg", None):
        model.update(_read_json(args.model_cfg))
    thresholds = dict(merged.pop("thresholds", {}))
    for var, (key, cast) in _ENV.items():
        if environ.get(var):
            try:
                merged[key] = cast(environ[var])
            except ValueError:
                raise UsageError(f"{var}={environ[var]!r} is not a valid {cast.__name__}") from None
    for name in _RUN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    for flag, key in _MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    for flag, key in _THRESHOLD_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            thresholds[key] = value
    if getattr(args, "no_cp", False):
        merged["use_cp"] = False
    if getattr(args, "no_pt", False):
        merged["use_pt"] = False
    try:
        cfg = RunConfig.from_dict({**merged, "model": model, "thresholds": thresholds})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    cfg.validate()
    return cfg


# --- output helpers ----------------------------------------------------------


def dump_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def log_event(out: Path, command: str, **info) -> None:
    """Timestamps and runtimes go to a sidecar log so JSON outputs stay reproducible."""
    out.mkdir(parents=True, exist_ok=True)
    record = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "command": command, **info}
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig) -> KnowledgeGraph:
    if not cfg.data:
        raise UsageError("no dataset given: use --data or set EXPATH_DATA")
    path = Path(cfg.data)
    root = os.environ.get("EXPATH_DATA")
    if not path.exists() and root and not path.is_absolute():
        path = Path(root) / path
    return load_dataset(path)


def _model_for(cfg: RunConfig, kg: KnowledgeGraph, checkpoint: str | None) -> kge.EmbeddingModel:
    if checkpoint:
        model = kge.load_checkpoint(checkpoint)
        if model.entities.shape[0] != kg.n_entities or model.relations.shape[0] != kg.n_relations:
            raise ValueError("checkpoint does not match the dataset's dictionaries")
        return model
    return kge.train(kg, cfg.model_config)


def _parse_prediction(kg: KnowledgeGraph, text: str) -> Fact:
    parts = text.split("\t") if "\t" in text else text.split()
    if len(parts) != 3:
        raise UsageError(f"prediction {text!r} must have three fields")
    try:
        return kg.fact_from_labels(*parts)
    except KeyError as exc:
        raise ValueError(f"prediction {text!r}: {exc.args[0]}") from None


# --- explanation pipeline ----------------------------------------------------


def explain_many(
    cfg: RunConfig, kg: KnowledgeGraph, model: kge.EmbeddingModel, predictions, k: int | None = None
) -> list[scorer.Explanation]:
    """Mine rules and select an explanation for each prediction on a worker pool."""
    k = k or cfg.k
    policy = scorer.resolve_policy(kg, cfg.policy)
    estimator = rules.RelevanceEstimator(model, kg, exclude_both=cfg.exclude_both)

    def one(pred):
        ruleset = rules.mine(
            kg, model, pred, cfg.thresholds, max_len=cfg.max_len, cap=cfg.path_cap,
            rel_eps=cfg.rel_eps, estimator=estimator,
        )
        return scorer.select_explanation(
            pred, ruleset, k, policy, kg, use_cp=cfg.use_cp, use_pt=cfg.use_pt, greedy=cfg.greedy
        )

    predictions = list(predictions)
    if cfg.workers == 1 or len(predictions) < 2:
        return [one(p) for p in predictions]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(one, predictions))


def _baseline(name: str):
    return attack.baseline_sparse if name == "sparse" else attack.baseline_random


def method_explanations(cfg, kg, model, targets, seed):
    """(method label, {target: fact set}) for the configured method."""
    facts = targets.facts
    if cfg.method == "expath":
        explained = explain_many(cfg, kg, model, facts)
        out = {ex.prediction: ex.fact_set for ex in explained}
        if cfg.fallback != "none":
            base = _baseline(cfg.fallback)
            for f in facts:
                if not out[f]:
                    out[f] = base(kg, f, cfg.k, seed)
        label = "expath"
        if not cfg.use_cp:
            label += "-no-cp"
        if not cfg.use_pt:
            label += "-no-pt"
        return label, out
    if cfg.method in ("sparse", "random"):
        base = _baseline(cfg.method)
        return cfg.method, {f: base(kg, f, cfg.k, seed) for f in facts}
    path = cfg.method[len("import:"):]
    name, imported = attack.import_external_explanations(kg, path)
    return name or Path(path).stem, {f: imported.get(f, set()) for f in facts}


# --- commands ----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    data = _read_json(args.spec) if args.spec else {}
    for key in ("entities", "relations", "density", "fan_in", "holdout"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.rule:
        data["rules"] = [_parse_planted(text) for text in args.rule]
    if args.seed is not None or os.environ.get("EXPATH_SEED") or "seed" not in data:
        data["seed"] = cfg.seed
    try:
        spec = synth.SyntheticSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, synth.InfeasibleSpecError):
            raise
        raise UsageError(str(exc)) from None
    kg = synth.generate(spec)
    out = Path(cfg.out)
    write_dataset(kg, out)
    dump_json(spec.to_dict(), out / "spec.json")
    print(f"wrote {kg.n_entities} entities, {len(kg.train)}/{len(kg.valid)}/{len(kg.test)} facts to {out}")
    return EXIT_OK


def _parse_planted(text: str) -> dict:
    """``head <- b1, b2 @ p`` (probability optional, default 0.9)."""
    body, _, prob = text.partition("@")
    head, arrow, rest = body.partition("<-")
    if not arrow:
        raise UsageError(f"planted rule {text!r} needs '<-'")
    rule = {"head": head.strip(), "body": [b.strip() for b in rest.split(",") if b.strip()]}
    if prob.strip():
        rule["probability"] = float(prob)
    return rule


def cmd_train(args, cfg: RunConfig) -> int:
    kg = _load_data(cfg)
    start = time.perf_counter()
    model = kge.train(kg, cfg.model_config)
    elapsed = time.perf_counter() - start
    out = Path(cfg.out)
    kge.save_checkpoint(model, out / CHECKPOINT_NAME)
    metrics = {"counts": {name: len(kg.split(name)) for name in ("train", "valid", "test")}}
    metrics["n_entities"], metrics["n_relations"] = kg.n_entities, kg.n_relations
    for split in ("train", "valid", "test"):
        facts = kg.split(split)
        if facts:
            mrr, h1, _ = kge.mrr_h1(model, kg, facts)
            metrics[split] = {"mrr": mrr, "h@1": h1}
    dump_json(metrics, out / "metrics.json")
    log_event(out, "train", seconds=elapsed)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_rules(args, cfg: RunConfig) -> int:
    kg = _load_data(cfg)
    results = []
    for text in args.rule:
        try:
            rule = rules.parse_rule(kg, text)
        except rules.RuleParseError as exc:
            raise UsageError(f"rule {text!r}: {exc}") from None
        metrics = rules.eval_rule(kg, rule, cfg.thresholds.min_supp)
        results.append({"rule": rule.serialize(kg), "input": text, **metrics.as_dict()})
    payload = {"rules": results}
    dump_json(payload, Path(cfg.out) / "rules.json")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_explain(args, cfg: RunConfig) -> int:
    kg = _load_data(cfg)
    model = _model_for(cfg, kg, args.checkpoint)
    if args.prediction:
        predictions = [_parse_prediction(kg, text) for text in args.prediction]
        for p in predictions:
            if p not in kg.test_set:
                raise ValueError(f"prediction {kg.fact_key(p)!r} is not in the test split")
    else:
        predictions = attack.select_targets(model, kg, cfg.targets, cfg.seed).facts
    start = time.perf_counter()
    explained = explain_many(cfg, kg, model, predictions)
    out = Path(cfg.out)
    dump_json({"explanations": [ex.to_json(kg) for ex in explained]}, out / "explanations.json")
    if args.dot:
        for i, ex in enumerate(explained):
            (out / f"explanation-{i:03d}.dot").write_text(scorer.explanation_dot(kg, ex), encoding="utf-8")
    log_event(out, "explain", seconds=time.perf_counter() - start, predictions=len(explained))
    for ex in explained:
        facts = ", ".join(kg.fact_key(sf.fact).replace("\t", " ") for sf in ex.facts) or "(none)"
        print(f"{kg.fact_key(ex.prediction).replace(chr(9), ' ')}: {facts}")
    return EXIT_OK


def run_attack_once(cfg: RunConfig, kg: KnowledgeGraph, run: int, checkpoint: str | None = None):
    seed = cfg.seed + run
    run_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
    model = _model_for(run_cfg, kg, checkpoint)
    targets = attack.select_targets(model, kg, cfg.targets, seed)
    label, explanations = method_explanations(run_cfg, kg, model, targets, seed)
    report = attack.run_attack(kg, model.config, targets, explanations, label, per_target=cfg.per_target)
    report.seeds = {"model": model.config.seed, "targets": seed}
    return report, explanations


def attack_payload(kg: KnowledgeGraph, reports, k: int) -> dict:
    return {
        "method": reports[0].method,
        "k": k,
        "runs": [r.to_json(kg) for r in reports],
        "summary": attack.summarize_runs(reports),
    }


def cmd_attack(args, cfg: RunConfig) -> int:
    kg = _load_data(cfg)
    out = Path(cfg.out)
    reports = []
    for run in range(cfg.runs):
        checkpoint = args.checkpoint if run == 0 else None
        report, explanations = run_attack_once(cfg, kg, run, checkpoint)
        reports.append(report)
        attack.export_explanations(kg, explanations, out / f"explanations-{report.method}-run{run}.json", report.method)
        log_event(out, "attack", method=report.method, run=run, **report.runtimes)
    payload = attack_payload(kg, reports, cfg.k)
    dump_json(payload, out / f"attack-{reports[0].method}.json")
    summary = payload["summary"]
    print(
        f"{reports[0].method}: dMRR {summary['delta_mrr']['mean']:.4f} +- {summary['delta_mrr']['std']:.4f}, "
        f"dH@1 {summary['delta_h1']['mean']:.4f} +- {summary['delta_h1']['std']:.4f}"
    )
    return EXIT_OK


def _report_from_json(run: dict) -> attack.AttackReport:
    rows = [
        attack.TargetRow(
            tuple(t["prediction"][x] for x in "hrt"), t["rr_before"], t["rr_after"], t["h1_before"], t["h1_after"]
        )
        for t in run["targets"]
    ]
    removed = [tuple(f[x] for x in "hrt") for f in run["removed"]]
    return attack.AttackReport.from_rows(run["method"], rows, removed, run.get("seeds"))


def _label_json(report: attack.AttackReport) -> dict:
    """AttackReport holding label triples instead of ids, serialized like ``to_json``."""
    return {
        "method": report.method,
        "n_targets": len(report.rows),
        "delta_mrr": report.delta_mrr,
        "delta_h1": report.delta_h1,
        "seeds": report.seeds,
        "targets": [
            {
                "prediction": dict(zip("hrt", r.fact)),
                "rr_before": r.rr_before,
                "rr_after": r.rr_after,
                "h1_before": r.h1_before,
                "h1_after": r.h1_after,
            }
            for r in report.rows
        ],
        "removed": [dict(zip("hrt", f)) for f in report.removed],
    }


def cmd_fuse(args, cfg: RunConfig) -> int:
    x, y = _read_json(args.report_x), _read_json(args.report_y)
    if len(x["runs"]) != len(y["runs"]):
        raise ValueError("reports have different numbers of runs")
    fused = [attack.fuse(_report_from_json(a), _report_from_json(b)) for a, b in zip(x["runs"], y["runs"])]
    payload = {
        "method": fused[0].method,
        "k": x.get("k"),
        "runs": [_label_json(r) for r in fused],
        "summary": attack.summarize_runs(fused),
    }
    path = dump_json(payload, Path(cfg.out) / f"attack-{fused[0].method}.json")
    print(f"{fused[0].method}: dMRR {payload['summary']['delta_mrr']['mean']:.4f} -> {path}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    rows = []
    for path in args.reports:
        data = _read_json(path)
        s = data["summary"]
        rows.append(
            {
                "method": data["method"],
                "k": data.get("k"),
                "runs": len(data["runs"]),
                "targets": data["runs"][0]["n_targets"] if data["runs"] else 0,
                "delta_mrr": s["delta_mrr"],
                "delta_h1": s["delta_h1"],
            }
        )
    dump_json({"reports": rows}, Path(cfg.out) / "summary.json")
    print(f"{'method':24s} {'k':>2s} {'runs':>4s} {'dMRR':>16s} {'dH@1':>16s}")
    for r in rows:
        m, h = r["delta_mrr"], r["delta_h1"]
        print(
            f"{r['method']:24s} {str(r['k']):>2s} {r['runs']:4d} "
            f"{m['mean']:8.4f}+-{m['std']:6.4f} {h['mean']:8.4f}+-{h['std']:6.4f}"
        )
    return EXIT_OK


# --- argument parsing --------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run configuration file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--jobs", type=int, default=default, help="worker threads (0 = logical cores)")
    parser.add_argument("--out", default=default, help="output directory")


def _data_flags(p):
    p.add_argument("--data", help="dataset directory with train/valid/test.txt")


def _model_flags(p):
    p.add_argument("--model-cfg", help="JSON model configuration file")
    p.add_argument("--model", dest="model_family", choices=kge.FAMILIES)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--neg", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--reg", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--optimizer", choices=kge.OPTIMIZERS)


def _explain_flags(p):
    p.add_argument("--checkpoint", help="checkpoint prefix or .meta.json (default: train from config)")
    p.add_argument("--k", type=int)
    p.add_argument("--policy", choices=(*scorer.POLICIES, "auto"))
    p.add_argument("--targets", type=_positive_int)
    p.add_argument("--rel-eps", type=float)
    p.add_argument("--exclude-both", action="store_true", default=None)
    p.add_argument("--no-cp", action="store_true")
    p.add_argument("--no-pt", action="store_true")
    p.add_argument("--greedy", action="store_true", default=None)
    p.add_argument("--min-sc", type=float)
    p.add_argument("--min-hc", type=float)
    p.add_argument("--min-supp", type=int)
    p.add_argument("--max-len", type=int, choices=(1, 2, 3))
    p.add_argument("--path-cap", type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expath", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-rule dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--spec", help="JSON synthetic spec")
    p.add_argument("--entities", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--fan-in", type=float)
    p.add_argument("--holdout", type=float)
    p.add_argument("--rule", action="append", help="planted rule 'r0 <- r1, r2 @ 0.9' (repeatable)")

    p = sub.add_parser("train", help="train an embedding model and write a checkpoint")
    _global_flags(p, suppress=True)
    _data_flags(p)
    _model_flags(p)

    p = sub.add_parser("rules", help="evaluate rule strings on the train split")
    _global_flags(p, suppress=True)
    _data_flags(p)
    p.add_argument("rule", nargs="+")
    p.add_argument("--min-supp", type=int)

    p = sub.add_parser("explain", help="explain test predictions")
    _global_flags(p, suppress=True)
    _data_flags(p)
    _model_flags(p)
    _explain_flags(p)
    p.add_argument("--prediction", action="append", help="'h r t' labels (repeatable)")
    p.add_argument("--dot", action="store_true", help="also write Graphviz files")

    p = sub.add_parser("attack", help="deletion attack on explanation facts")
    _global_flags(p, suppress=True)
    _data_flags(p)
    _model_flags(p)
    _explain_flags(p)
    p.add_argument("--method", help="expath | sparse | random | import:<path>")
    p.add_argument("--runs", type=_positive_int)
    p.add_argument("--fallback", choices=("none", "sparse", "random"))
    p.add_argument("--per-target", action="store_true", default=None)

    p = sub.add_parser("fuse", help="per-target minimum of two attack reports")
    _global_flags(p, suppress=True)
    p.add_argument("report_x")
    p.add_argument("report_y")

    p = sub.add_parser("report", help="tabulate attack reports")
    _global_flags(p, suppress=True)
    p.add_argument("reports", nargs="+")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "rules": cmd_rules,
    "explain": cmd_explain,
    "attack": cmd_attack,
    "fuse": cmd_fuse,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = compose_config(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, KeyError, ParseError, RuntimeError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"expath: error: {message}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
