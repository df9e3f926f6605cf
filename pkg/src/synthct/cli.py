"""Command-line interface.

Every subcommand takes an optional ``--config FILE`` of ``key = value`` lines
and ``--key=value`` flags; flags win over the file, the file over defaults.
Each run writes ``manifest.json`` into its output directory listing the
resolved configuration and a SHA-256 of every artifact, and ``replay``
re-executes a manifest and checks the artifacts are bit-identical.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .evaluator import aggregate, body_mask, evaluate_volume, render_csv, render_table
from .losses import DivergenceError, LossWeights
from .panel import render_panel
from .phantom import generate_phantom, phantom_cohort
from .preprocess import NormalizationSpec, normalize_ct, normalize_mri, stack_slices
from .trainer import Checkpoint, ModelConfig, TrainConfig, train, translate_volume
from .volume import read_volume, split_train_test, write_volume

log = logging.getLogger("synthct")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

ABLATION_ROWS = (
    ("DualGAN", False, False),
    ("DualGAN, CC", False, True),
    ("DualGAN, VGG", True, False),
    ("DualGAN, VGG, CC", True, True),
)


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pair(cast):
    def parse(s: str):
        parts = [cast(p) for p in s.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated values, got {s!r}")
        return tuple(parts)
    return parse


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


# key -> (parser, default); defaults are strings so they pass through the same parsers
TRAIN_KEYS: dict[str, tuple[Callable, str]] = {
    "seed": (int, "0"),
    "steps": (int, "2000"),
    "batch_size": (int, "4"),
    "critic_steps": (int, "2"),
    "clip": (float, "0.01"),
    "learning_rate": (float, "5e-5"),
    "resolution": (_pair(int), "64,64"),
    "checkpoint_every": (int, "500"),
    "lr_decay_start": (int, "0"),
    "use_vgg": (_bool, "true"),
    "use_cc": (_bool, "true"),
    "lambda_cycle": (float, "10"),
    "lambda_perceptual": (float, "1"),
    "base_width": (int, "64"),
    "levels": (int, "3"),
    "critic_widths": (_ints, "64,128,256,512"),
    "critic_strides": (_ints, "2,2,2,1"),
    "perceptual.provider": (str, "seeded-random"),
    "perceptual.layer": (str, "relu2_2"),
    "perceptual.seed": (int, "0"),
    "perceptual.weights_path": (str, ""),
}
NORM_KEYS = {
    "ct_clip": (_pair(float), "-1000,2000"),
    "mri_percentiles": (_pair(float), "1,99"),
}
SPLIT_KEYS = {
    "ratio_train": (float, "0.7"),
    "split_seed": (int, "0"),
}

COMMAND_KEYS: dict[str, dict[str, tuple[Callable, str]]] = {
    "phantom": {
        "out": (str, ""), "count": (int, "10"), "seed": (int, "0"), "n_slices": (int, "16"),
        "height": (int, "64"), "width": (int, "64"), "noise_sigma": (float, "0.01"),
    },
    "preprocess": {"data": (str, ""), "out": (str, ""), "resolution": (_pair(int), "64,64"),
                   **NORM_KEYS, **SPLIT_KEYS},
    "train": {"data": (str, ""), "out": (str, ""), **TRAIN_KEYS},
    "translate": {"checkpoint": (str, ""), "data": (str, ""), "out": (str, ""), "ids": (str, "")},
    "evaluate": {"syn": (str, ""), "real": (str, ""), "out": (str, ""), "label": (str, "model"),
                 "data_range": (float, "3000"), "ids": (str, "")},
    "ablate": {"data": (str, ""), "out": (str, ""), **TRAIN_KEYS, **NORM_KEYS, **SPLIT_KEYS},
    "report": {"mri": (str, ""), "syn": (str, ""), "real": (str, ""), "mask": (str, ""),
               "out": (str, ""), "slices": (_ints, ""), "bound_hu": (float, "300")},
}
REQUIRED = {
    "phantom": ("out",), "preprocess": ("data", "out"), "train": ("data", "out"),
    "translate": ("checkpoint", "data", "out"), "evaluate": ("syn", "real", "out"),
    "ablate": ("data", "out"), "report": ("mri", "syn", "real", "out"),
}


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> dict:
    keys = COMMAND_KEYS[command]
    raw = {k: default for k, (_, default) in keys.items()}
    for source in (file_values, flag_values):
        unknown = sorted(set(source) - set(keys))
        if unknown:
            raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
        raw.update(source)
    resolved = {}
    for k, (parse, _) in keys.items():
        try:
            resolved[k] = parse(raw[k]) if raw[k] != "" or parse is str else ()
        except ValueError as exc:
            raise ConfigError(f"invalid value for {k}: {exc}") from None
    missing = [k for k in REQUIRED[command] if not resolved.get(k)]
    if missing:
        raise ConfigError(f"{command}: missing required key(s) {', '.join(missing)}")
    resolved["_raw"] = raw
    return resolved


def train_config(c: dict, **overrides) -> TrainConfig:
    try:
        model = ModelConfig(
            use_vgg=overrides.get("use_vgg", c["use_vgg"]),
            use_cc=overrides.get("use_cc", c["use_cc"]),
            weights=LossWeights(c["lambda_cycle"], c["lambda_perceptual"]),
            base_width=c["base_width"],
            levels=c["levels"],
            critic_widths=tuple(c["critic_widths"]),
            critic_strides=tuple(c["critic_strides"]),
            feature_provider=c["perceptual.provider"],
            feature_layer=c["perceptual.layer"],
            feature_seed=c["perceptual.seed"],
            weights_path=c["perceptual.weights_path"] or None,
        )
        return TrainConfig(model=model, steps=c["steps"], batch_size=c["batch_size"],
                           critic_steps=c["critic_steps"], clip=c["clip"],
                           learning_rate=c["learning_rate"], seed=c["seed"],
                           resolution=tuple(c["resolution"]), checkpoint_every=c["checkpoint_every"],
                           lr_decay_start=c["lr_decay_start"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    out: Path
    inputs: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)
    outputs: list[Path] = field(default_factory=list)
    started: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def write(self) -> Path:
        rel = {}
        for p in sorted(set(self.outputs)):
            try:
                key = str(p.resolve().relative_to(self.out.resolve()))
            except ValueError:
                key = str(p)
            rel[key] = _sha256(p)
        doc = {
            "command": self.command,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "checkpoint": self.checkpoint,
            "metrics": self.metrics,
            "outputs": rel,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "version": __version__,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _volume_ids(data: Path, suffix: str) -> list[str]:
    ids = sorted(p.name[: -len(f"_{suffix}.vhdr")] for p in data.glob(f"*_{suffix}.vhdr"))
    if not ids:
        raise FileNotFoundError(f"no *_{suffix}.vhdr volumes in {data}")
    return ids


def _norm(c: dict) -> NormalizationSpec:
    try:
        return NormalizationSpec(tuple(c["ct_clip"]), tuple(c["mri_percentiles"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_history(path: Path, history) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "adv_g", "adv_d", "cycle", "perceptual", "total_g"])
        for i, h in enumerate(history, 1):
            w.writerow([i, repr(h.adv_g), repr(h.adv_d), repr(h.cycle), repr(h.perceptual), repr(h.total_g)])
    return path


def _slice_pools(data: Path, ids: list[str], norm: NormalizationSpec, resolution) -> tuple[np.ndarray, np.ndarray]:
    mri, ct = [], []
    for pid in ids:
        mri += normalize_mri(read_volume(data / f"{pid}_mri"), norm)
        ct += normalize_ct(read_volume(data / f"{pid}_ct"), norm)
    return (stack_slices(mri, three_channel=False, target_hw=resolution),
            stack_slices(ct, three_channel=False, target_hw=resolution))


# -- subcommands -------------------------------------------------------------

def cmd_phantom(c: dict, m: RunManifest) -> None:
    out = m.out
    specs = phantom_cohort(c["count"], seed=c["seed"], n_slices=c["n_slices"], height=c["height"],
                           width=c["width"], noise_sigma=c["noise_sigma"])
    for spec in specs:
        ph = generate_phantom(spec)
        for kind, vol in (("mri", ph.mri), ("ct", ph.ct), ("mask", ph.body_mask)):
            stem = out / f"{spec.name}_{kind}"
            write_volume(vol, stem)
            m.add(stem.with_name(stem.name + ".vhdr"))
            m.add(stem.with_name(stem.name + ".vraw"))
        m.inputs.append(spec.name)


def cmd_preprocess(c: dict, m: RunManifest) -> None:
    data, out = Path(c["data"]), m.out
    ids = _volume_ids(data, "mri")
    split = split_train_test(ids, c["ratio_train"], c["split_seed"])
    norm = _norm(c)
    mri, ct = _slice_pools(data, split.train_ids, norm, c["resolution"])
    np.save(m.add(out / "train_mri.npy"), mri)
    np.save(m.add(out / "train_ct.npy"), ct)
    doc = {"train_ids": split.train_ids, "test_ids": split.test_ids,
           "ct_clip": list(norm.ct_clip), "mri_percentiles": list(norm.mri_percentiles),
           "source": str(data)}
    (out / "split.json").write_text(json.dumps(doc, indent=2) + "\n")
    m.add(out / "split.json")
    m.inputs = ids
    m.metrics = {"train_slices": int(len(mri)), "n_train": len(split.train_ids), "n_test": len(split.test_ids)}


def _load_preprocessed(data: Path) -> tuple[np.ndarray, np.ndarray, dict]:
    meta = json.loads((data / "split.json").read_text())
    return np.load(data / "train_mri.npy"), np.load(data / "train_ct.npy"), meta


def cmd_train(c: dict, m: RunManifest) -> None:
    data, out = Path(c["data"]), m.out
    mri, ct, meta = _load_preprocessed(data)
    cfg = train_config(c)
    norm = NormalizationSpec(tuple(meta["ct_clip"]), tuple(meta["mri_percentiles"]))
    ck_dir = out / "checkpoints"
    ck, history = train(cfg, mri, ct, norm, checkpoint_dir=ck_dir, log_every=max(cfg.steps // 20, 1))
    for p in sorted(ck_dir.glob("*.dct")):
        m.add(p)
    m.add(_write_history(out / "history.csv", history))
    m.inputs = meta["train_ids"]
    m.checkpoint = str(ck_dir / "final.dct")
    m.metrics = {"final_cycle": history[-1].cycle, "final_total_g": history[-1].total_g,
                 "generator_input_channels": cfg.model.generator_spec.in_channels}


def cmd_translate(c: dict, m: RunManifest) -> None:
    data, out = Path(c["data"]), m.out
    ck = Checkpoint.load(c["checkpoint"])
    ids = [s for s in c["ids"].split(",") if s] if c["ids"] else _volume_ids(data, "mri")
    g = ck.network("g_mri2ct")
    for pid in ids:
        syn = translate_volume(ck, read_volume(data / f"{pid}_mri"), generator=g)
        stem = out / f"{pid}_syn"
        write_volume(syn, stem)
        m.add(stem.with_name(stem.name + ".vhdr"))
        m.add(stem.with_name(stem.name + ".vraw"))
    m.inputs = ids
    m.checkpoint = c["checkpoint"]


def _evaluate_dir(syn_dir: Path, real_dir: Path, ids: list[str], data_range: float):
    records = []
    for pid in ids:
        syn = read_volume(syn_dir / f"{pid}_syn")
        real = read_volume(real_dir / f"{pid}_ct")
        records.append(evaluate_volume(syn, real, body_mask(real), data_range))
    return records


def _write_records(path: Path, records) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "mae_hu", "psnr_db", "ssim"])
        for r in records:
            w.writerow([r.patient_id, repr(r.mae_hu), repr(r.psnr_db), repr(r.ssim)])
    return path


def cmd_evaluate(c: dict, m: RunManifest) -> None:
    syn_dir, real_dir, out = Path(c["syn"]), Path(c["real"]), m.out
    ids = [s for s in c["ids"].split(",") if s] if c["ids"] else _volume_ids(syn_dir, "syn")
    records = _evaluate_dir(syn_dir, real_dir, ids, c["data_range"])
    report = aggregate(records, c["label"])
    _write_records(m.add(out / "metrics.csv"), records)
    (out / "report.txt").write_text(render_table([report]))
    (out / "report.csv").write_text(render_csv([report]))
    m.add(out / "report.txt")
    m.add(out / "report.csv")
    m.inputs = ids
    m.metrics = report.as_row()
    print(render_table([report]), end="")


def run_ablation(c: dict, out: Path, manifest: RunManifest | None = None) -> list:
    """Train and evaluate the four (VGG, CC) configurations on one split.

    Every row uses the same seeds and slice order; only the two switches differ.
    """
    data = Path(c["data"])
    ids = _volume_ids(data, "mri")
    split = split_train_test(ids, c["ratio_train"], c["split_seed"])
    norm = _norm(c)
    mri, ct = _slice_pools(data, split.train_ids, norm, c["resolution"])
    reports, rows = [], []
    for label, use_vgg, use_cc in ABLATION_ROWS:
        cfg = train_config(c, use_vgg=use_vgg, use_cc=use_cc)
        sub = out / label.replace(", ", "_").lower()
        sub.mkdir(parents=True, exist_ok=True)
        log.info("ablation: training %s", label)
        try:
            ck, history = train(cfg, mri, ct, norm, log_every=max(cfg.steps // 10, 1))
        except DivergenceError as exc:
            err = DivergenceError(f"[{label}] {exc}")
            err.step = exc.step
            raise err from exc
        ck_path = ck.save(sub / "final.dct")
        g = ck.network("g_mri2ct")
        records = []
        for pid in split.test_ids:
            real = read_volume(data / f"{pid}_ct")
            syn = translate_volume(ck, read_volume(data / f"{pid}_mri"), generator=g)
            write_volume(syn, sub / f"{pid}_syn")
            records.append(evaluate_volume(syn, real, body_mask(real)))
        report = aggregate(records, label)
        reports.append(report)
        rows.append({
            "label": label, "use_vgg": use_vgg, "use_cc": use_cc,
            "generator_input_channels": cfg.model.generator_spec.in_channels,
            "perceptual_max": max(h.perceptual for h in history),
            "steps": len(history),
        })
        if manifest is not None:
            manifest.add(ck_path)
            manifest.add(_write_history(sub / "history.csv", history))
            manifest.add(_write_records(sub / "metrics.csv", records))
            for pid in split.test_ids:
                manifest.add(sub / f"{pid}_syn.vhdr")
                manifest.add(sub / f"{pid}_syn.vraw")
    (out / "report.txt").write_text(render_table(reports))
    (out / "report.csv").write_text(render_csv(reports))
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "train_ids": split.train_ids,
                                                   "test_ids": split.test_ids}, indent=2) + "\n")
    if manifest is not None:
        for name in ("report.txt", "report.csv", "ablation.json"):
            manifest.add(out / name)
        manifest.inputs = ids
        manifest.metrics = {r.config: r.as_row() for r in reports}
    return reports


def cmd_ablate(c: dict, m: RunManifest) -> None:
    reports = run_ablation(c, m.out, m)
    print(render_table(reports), end="")


def cmd_report(c: dict, m: RunManifest) -> None:
    mri, syn, real = (read_volume(c[k]) for k in ("mri", "syn", "real"))
    mask = read_volume(c["mask"]) if c["mask"] else body_mask(real)
    slices = list(c["slices"]) or None
    m.add(render_panel(mri, syn, real, mask, m.out / "panel.png", slices, c["bound_hu"]))
    m.inputs = [str(c["mri"]), str(c["syn"]), str(c["real"])]


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthct", description="Unpaired MRI-to-CT translation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        for key in keys:
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    rp = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="write to this directory instead of the recorded one")
    return parser


def run_command(command: str, config: dict) -> RunManifest:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, {k: v for k, v in config["_raw"].items()}, out)
    COMMANDS[command](config, manifest)
    manifest.write()
    return manifest


def _replay(manifest_path: str, out: str | None) -> int:
    doc = json.loads(Path(manifest_path).read_text())
    raw = dict(doc["config"])
    if out is not None:
        raw["out"] = out
    config = resolve_config(doc["command"], raw, {})
    new = run_command(doc["command"], config)
    fresh = json.loads((new.out / "manifest.json").read_text())["outputs"]
    if fresh != doc["outputs"]:
        changed = sorted(k for k in set(fresh) | set(doc["outputs"]) if fresh.get(k) != doc["outputs"].get(k))
        print(f"replay mismatch in {len(changed)} artifact(s): {', '.join(changed[:10])}", file=sys.stderr)
        return EXIT_DATA
    print(f"replay reproduced {len(fresh)} artifact(s) bit-identically")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "replay":
            return _replay(args.manifest, args.out)
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items()
                 if k in COMMAND_KEYS[args.command] and v is not None}
        config = resolve_config(args.command, file_values, flags)
        run_command(args.command, config)
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
