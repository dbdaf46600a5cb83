"""Command line: ``cclis train|study|export -c config.yaml``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .evaluation import SCENARIOS, ProbeConfig, RunMetrics, average_forgetting
from .model import features, save_checkpoint
from .oracle import MseStudyConfig, kl_objective, mse_study, simplex_minimize_kl, write_study_csv
from .replay import compute_proposal
from .tasks import TaskStream, gen_synthetic_stream, load_image_stream
from .trainer import PRESETS, TrainConfig, run_experiment

log = logging.getLogger("cclis")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
METRICS_COLUMNS = ("seed", "scenario", "after_task", "eval_task", "accuracy", "avg_accuracy", "avg_forgetting")
INCOMPLETE = ".incomplete"


class ConfigError(ValueError):
    pass


SYNTHETIC_DEFAULTS = {
    "T": 5,
    "classes_per_task": 2,
    "n_per_class": 50,
    "input_dim": 16,
    "cluster_spread": 1.0,
    "inter_class_margin": 4.0,
    "test_fraction": 0.2,
}
IMAGE_DEFAULTS = {"path": None, "task_splits": None, "test_fraction": 0.2}
STUDY_DEFAULTS = {
    **{f.name: f.default for f in dataclasses.fields(MseStudyConfig) if f.name != "seed"},
    "kl_sets": 100,
    "kl_random_points": 1000,
}
# config key -> TrainConfig field
TRAIN_KEYS = {f.name: f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "lam")}
TRAIN_KEYS["lambda"] = "lam"
EVAL_KEYS = {f.name for f in dataclasses.fields(ProbeConfig)} | {"scenarios"}
TOP_KEYS = {"stream", "train", "eval", "preset", "presets", "lambda_sweep", "seeds", "output_dir", "study"}


@dataclass
class ExperimentConfig:
    stream: dict[str, Any]
    train: TrainConfig
    probe: ProbeConfig
    scenarios: tuple[str, ...] = SCENARIOS
    presets: tuple[str, ...] = ("full",)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "cclis_out"
    lambda_sweep: tuple[float, ...] = ()
    study: dict[str, Any] = field(default_factory=lambda: dict(STUDY_DEFAULTS))

    def resolved(self) -> dict:
        """Plain mapping with every default materialized."""
        train = {k: getattr(self.train, v) for k, v in TRAIN_KEYS.items()}
        train["hidden"] = list(train["hidden"])
        probe = dataclasses.asdict(self.probe)
        probe["milestones"] = list(probe["milestones"])
        probe["scenarios"] = list(self.scenarios)
        study = {k: list(v) if isinstance(v, tuple) else v for k, v in self.study.items()}
        return {
            "stream": self.stream,
            "train": train,
            "eval": probe,
            "presets": list(self.presets),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "lambda_sweep": list(self.lambda_sweep),
            "study": study,
        }

    def build_stream(self, seed: int) -> TaskStream:
        if "synthetic" in self.stream:
            return gen_synthetic_stream(seed=seed, **self.stream["synthetic"])
        image = self.stream["image"]
        return load_image_stream(image["path"], image["task_splits"], image["test_fraction"])


def _check_keys(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(section).__name__}")
    for key in section:
        if key not in allowed:
            near = difflib.get_close_matches(str(key), sorted(allowed), n=1)
            hint = f"; did you mean {near[0]!r}?" if near else f"; valid keys: {sorted(allowed)}"
            raise ConfigError(f"{path}.{key}: unknown key{hint}".lstrip("."))


def _coerce(value, default, path: str):
    """Check ``value`` against the type of ``default``."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], f"{path}[{k}]") for k, v in enumerate(value))
        return tuple(value)
    return value


def _section(raw: dict, defaults: dict, path: str) -> dict:
    raw = raw or {}
    _check_keys(raw, defaults, path)
    return {k: _coerce(raw[k], d, f"{path}.{k}") if k in raw else d for k, d in defaults.items()}


def parse_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from err
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, TOP_KEYS, "")
    stream_raw = raw.get("stream")
    if stream_raw is None:
        raise ConfigError("stream: missing required section")
    _check_keys(stream_raw, {"synthetic", "image"}, "stream")
    if len(stream_raw) != 1:
        raise ConfigError("stream: exactly one of 'synthetic' or 'image' is required")
    if "synthetic" in stream_raw:
        stream = {"synthetic": _section(stream_raw["synthetic"], SYNTHETIC_DEFAULTS, "stream.synthetic")}
    else:
        image = _section(stream_raw["image"], IMAGE_DEFAULTS, "stream.image")
        for key in ("path", "task_splits"):
            if image[key] is None:
                raise ConfigError(f"stream.image.{key}: missing required key")
        stream = {"image": image}

    base = TrainConfig()
    train_defaults = {k: getattr(base, v) for k, v in TRAIN_KEYS.items()}
    train_vals = _section(raw.get("train"), train_defaults, "train")
    probe_defaults = {f.name: f.default for f in dataclasses.fields(ProbeConfig)}
    probe_defaults["scenarios"] = SCENARIOS
    probe_vals = _section(raw.get("eval"), probe_defaults, "eval")
    scenarios = probe_vals.pop("scenarios")
    for s in scenarios:
        if s not in SCENARIOS:
            raise ConfigError(f"eval.scenarios: unknown scenario {s!r}; expected one of {SCENARIOS}")

    if "preset" in raw and "presets" in raw:
        raise ConfigError("preset: give either 'preset' or 'presets', not both")
    presets = raw.get("presets", [raw.get("preset", "full")])
    presets = (presets,) if isinstance(presets, str) else tuple(_coerce(presets, ("",), "presets"))
    for p in presets:
        if p not in PRESETS:
            near = difflib.get_close_matches(p, sorted(PRESETS), n=1)
            raise ConfigError(f"presets: unknown preset {p!r}" + (f"; did you mean {near[0]!r}?" if near else ""))
    seeds = tuple(_coerce(raw.get("seeds", [0]), (0,), "seeds"))
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    sweep = tuple(_coerce(raw.get("lambda_sweep", []), (0.0,), "lambda_sweep"))
    output_dir = _coerce(raw.get("output_dir", "cclis_out"), "", "output_dir")
    study = _section(raw.get("study"), STUDY_DEFAULTS, "study")

    try:
        train = TrainConfig(**{TRAIN_KEYS[k]: v for k, v in train_vals.items()})
        probe = ProbeConfig(**probe_vals)
        MseStudyConfig(**{k: v for k, v in study.items() if k not in ("kl_sets", "kl_random_points")})
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return ExperimentConfig(stream, train, probe, tuple(scenarios), presets, seeds, output_dir, sweep, study)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_resolved(cfg: ExperimentConfig, directory: Path) -> None:
    _atomic_write(directory / "config.resolved.yaml", yaml.safe_dump(cfg.resolved(), sort_keys=False))


def metrics_rows(metrics: RunMetrics, seed: int) -> list[dict]:
    rows = []
    for scenario, matrix in metrics.matrices.items():
        a = matrix.values
        for l in range(a.shape[0]):
            avg_acc = float(np.mean(a[l, : l + 1]))
            forget = average_forgetting(a[: l + 1, : l + 1]) if l >= 1 else ""
            for t in range(l + 1):
                rows.append(
                    {
                        "seed": seed,
                        "scenario": scenario,
                        "after_task": l + 1,
                        "eval_task": t + 1,
                        "accuracy": float(a[l, t]),
                        "avg_accuracy": avg_acc,
                        "avg_forgetting": forget,
                    }
                )
    return rows


def _csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _final_summary(rows: list[dict]) -> dict:
    """mean and sample std over seeds of the final-row metrics per scenario."""
    out = {}
    for scenario in sorted({r["scenario"] for r in rows}):
        mine = [r for r in rows if r["scenario"] == scenario]
        last = max(int(r["after_task"]) for r in mine)
        final = {}
        for r in mine:
            if int(r["after_task"]) == last:
                final[r["seed"]] = r
        stats = {}
        for key in ("avg_accuracy", "avg_forgetting"):
            vals = np.array([float(r[key]) for r in final.values() if r[key] != ""])
            stats[key] = {
                "mean": float(vals.mean()) if vals.size else None,
                "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else None,
                "n": int(vals.size),
            }
        out[scenario] = stats
    return out


def export_metrics(out: Path, presets) -> dict:
    """Gather per-seed metrics.csv files under ``out/<preset>/seed*/`` into one
    metrics.csv per preset and a summary.json."""
    summary = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "presets": {}}
    for preset in presets:
        files = sorted((out / preset).glob("seed*/metrics.csv"), key=lambda p: int(p.parent.name[4:]))
        if not files:
            raise FileNotFoundError(f"no per-seed metrics under {out / preset}")
        rows = [r for f in files for r in _read_rows(f)]
        _atomic_write(out / preset / "metrics.csv", _csv_text(rows, METRICS_COLUMNS))
        summary["presets"][preset] = {"seeds": [int(f.parent.name[4:]) for f in files], **_final_summary(rows)}
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def sweep_svg(lams, means, stds, title: str = "Class-IL accuracy vs distill weight") -> str:
    """Line plot with one marker per lambda and +-std whiskers."""
    w, h, pad = 480, 320, 50
    lams, means, stds = map(np.asarray, (lams, means, stds))
    x0, x1 = float(lams.min()), float(lams.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y0 = max(0.0, float((means - stds).min()) - 0.05)
    y1 = min(1.0, float((means + stds).max()) + 0.05)
    y1 = y1 if y1 > y0 else y0 + 0.1

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def py(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2:.1f}" y="{h - 10}" text-anchor="middle" font-size="12">lambda</text>',
        f'<text x="15" y="{h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {h / 2:.1f})">accuracy</text>',
    ]
    for v in np.linspace(y0, y1, 5):
        parts.append(f'<text x="{pad - 5}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.2f}</text>')
    pts = " ".join(f"{px(a):.1f},{py(m):.1f}" for a, m in zip(lams, means))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for a, m, s in zip(lams, means, stds):
        parts.append(
            f'<line x1="{px(a):.1f}" y1="{py(m - s):.1f}" x2="{px(a):.1f}" y2="{py(m + s):.1f}" stroke="steelblue"/>'
        )
        parts.append(f'<circle cx="{px(a):.1f}" cy="{py(m):.1f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{px(a):.1f}" y="{h - pad + 15}" text-anchor="middle" font-size="10">{a:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _run_seed(cfg: ExperimentConfig, train_cfg: TrainConfig, seed: int, directory: Path) -> RunMetrics:
    directory.mkdir(parents=True, exist_ok=True)
    stream = cfg.build_stream(seed)
    metrics = run_experiment(
        stream,
        dataclasses.replace(train_cfg, seed=seed),
        cfg.probe,
        out_dir=directory,
        scenarios=cfg.scenarios,
    )
    _atomic_write(directory / "metrics.csv", _csv_text(metrics_rows(metrics, seed), METRICS_COLUMNS))
    _atomic_write(directory / "loss_trace.txt", "".join(f"{v:.17g}\n" for v in metrics.loss_trace))
    save_checkpoint(metrics.artifacts["run"].model, directory / "checkpoint.json")
    _write_resolved(cfg, directory)
    return metrics


def cmd_train(cfg: ExperimentConfig, out: Path) -> None:
    for preset in cfg.presets:
        train_cfg = cfg.train.with_preset(preset)
        for seed in cfg.seeds:
            log.info("preset %s seed %d", preset, seed)
            _run_seed(cfg, train_cfg, seed, out / preset / f"seed{seed}")
        _write_resolved(cfg, out / preset)
    export_metrics(out, cfg.presets)

    if cfg.lambda_sweep:
        rows = []
        for lam in cfg.lambda_sweep:
            sweep_cfg = dataclasses.replace(cfg.train, lam=lam).with_preset("full")
            accs = []
            for seed in cfg.seeds:
                m = _run_seed(cfg, sweep_cfg, seed, out / "lambda_sweep" / f"lambda{lam:g}" / f"seed{seed}")
                accs.append(m.average_accuracy("class-il") if "class-il" in m.matrices else np.nan)
                rows.append({"lambda": lam, "seed": seed, "class_il_accuracy": accs[-1]})
        _atomic_write(out / "lambda_sweep.csv", _csv_text(rows, ("lambda", "seed", "class_il_accuracy")))
        lams = list(cfg.lambda_sweep)
        by = [[r["class_il_accuracy"] for r in rows if r["lambda"] == lam] for lam in lams]
        means = [float(np.mean(v)) for v in by]
        stds = [float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for v in by]
        _atomic_write(out / "lambda_sweep.svg", sweep_svg(lams, means, stds))
    _write_resolved(cfg, out)


def kl_check(n_sets: int, n_random: int, seed: int) -> list[dict]:
    """Closed-form proposal vs the simplex oracle and random simplex points."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_sets):
        size = int(rng.integers(2, 11))
        n = int(rng.integers(1, 6))
        targets = rng.dirichlet(np.ones(size), size=n)
        g = compute_proposal(list(targets))
        oracle = simplex_minimize_kl(targets)
        obj = kl_objective(targets, g)
        randoms = rng.dirichlet(np.ones(size), size=n_random)
        beaten = sum(obj <= kl_objective(targets, r) + 1e-9 for r in randoms)
        rows.append(
            {
                "set": k,
                "support": size,
                "n_targets": n,
                "linf_to_oracle": float(np.max(np.abs(g - oracle.g))),
                "objective_closed_form": obj,
                "objective_oracle": oracle.objective,
                "random_points_beaten": int(beaten),
                "random_points": n_random,
            }
        )
    return rows


def cmd_study(cfg: ExperimentConfig, out: Path) -> None:
    study = dict(cfg.study)
    kl_sets, kl_points = study.pop("kl_sets"), study.pop("kl_random_points")
    seed = cfg.seeds[0]
    report = mse_study(MseStudyConfig(**study, seed=seed))
    write_study_csv(report, out / "study_mse.csv")
    rows = kl_check(kl_sets, kl_points, seed)
    _atomic_write(out / "study_kl.csv", _csv_text(rows, tuple(rows[0]) if rows else ("set",)))
    wins, trials, p = report.sign_test()
    summary = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "sign_test_eq12_vs_uniform": {"wins": wins, "trials": trials, "p_value": p},
        "bound_violations": len(report.bound_violations),
        "loose_rows": len(report.loose_rows),
        "kl_max_linf": max((r["linf_to_oracle"] for r in rows), default=0.0),
    }
    _atomic_write(out / "study_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_resolved(cfg, out)


def export_embeddings(cfg: ExperimentConfig, out: Path) -> Path:
    preset, seed = cfg.presets[0], cfg.seeds[0]
    directory = out / preset / f"seed{seed}"
    metrics = _run_seed(cfg, cfg.train.with_preset(preset), seed, directory)
    run = metrics.artifacts["run"]
    stream = cfg.build_stream(seed)
    in_buffer = set(run.buffer.ids.tolist())
    lines = []
    dim = None
    for task in stream.tasks:
        for x, y, ids in ((task.train_x, task.train_y, task.train_ids), (task.test_x, task.test_y, task.test_ids)):
            if len(y) == 0:
                continue
            z = features(run.model, x, "projection")
            dim = z.shape[1]
            for sid, cls, row in zip(ids, y, z):
                comps = "\t".join(f"{v:.17g}" for v in row)
                lines.append(f"{int(sid)}\t{task.task_id}\t{int(cls)}\t{int(int(sid) in in_buffer)}\t{comps}\n")
    lines.sort(key=lambda s: int(s.split("\t", 1)[0]))
    header = "sample_id\ttask\tclass\tin_buffer\t" + "\t".join(f"z{k}" for k in range(dim or 0)) + "\n"
    path = out / "embeddings.tsv"
    _atomic_write(path, header + "".join(lines))
    _write_resolved(cfg, out)
    return path


def run(cfg: ExperimentConfig, subcommand: str, what: str = "metrics") -> int:
    out = Path(os.environ.get("CCLIS_OUT") or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text(f"{subcommand} started\n")
    try:
        if subcommand == "train":
            cmd_train(cfg, out)
        elif subcommand == "study":
            cmd_study(cfg, out)
        elif subcommand == "export":
            if what == "embeddings":
                export_embeddings(cfg, out)
            else:
                export_metrics(out, cfg.presets)
        else:
            raise ValueError(f"unknown subcommand {subcommand!r}")
    except Exception as err:  # noqa: BLE001 - every failure maps to the runtime exit code
        log.error("%s failed: %s", subcommand, err)
        marker.write_text(f"{subcommand} failed: {err}\n")
        return EXIT_RUNTIME
    marker.unlink()
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cclis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "study", "export"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="YAML experiment config")
        if name == "export":
            p.add_argument("--what", choices=("embeddings", "metrics"), default="metrics")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, args.command, getattr(args, "what", "metrics"))


if __name__ == "__main__":
    sys.exit(main())
