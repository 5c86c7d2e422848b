"""Command-line entry point.

One JSON config drives every command; flags only pick the command and paths.
Artifacts land in a timestamped run directory (or ``--run-dir``) together with
the exact config used and a ``MANIFEST`` index of every file written.

    demorph gen-data --config exp.json --out data/
    demorph train    --config exp.json [--data data/manifest.json] [--resume CKPT]
    demorph decompose --checkpoint CKPT --image face.png --out dir/
    demorph demorph  --checkpoint CKPT --image morph.png --out dir/ [--bonafides B1 B2]
    demorph evaluate --checkpoint CKPT --config exp.json [--data data/manifest.json]
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .biometric import DEFAULT_TAU, get_comparator
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, DemorphError, ModeError
from .imaging import (DatasetSplit, build_scenario1_split, generate_dataset, identity_seeds,
                      load_manifest_samples, load_png, read_manifest, render_bonafide, save_png,
                      write_manifest)
from .metrics import component_leakage, iqa, match_accuracy, restoration_accuracy
from .training import TrainConfig, run_decomposition, run_demorph, train_decomposition, train_demorph

log = logging.getLogger("demorph")

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs",
    "tau": DEFAULT_TAU,
    "comparator": {"name": "toy", "options": {}},
    "data": {
        "n_identities": 6,
        "variations_per_identity": 1,
        "alphas": [0.5],
        "train_fraction": 0.6,
        "manifest": None,
    },
    "train": TrainConfig(mode="demorphing").to_dict(),
}
DEFAULT_CONFIG["train"]["net"]["heads"] = 2
GRID_ROWS = 4


# -- config -------------------------------------------------------------------

def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "options":
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path):
    """Read a JSON config over the defaults and validate it.

    The training seed follows the top-level ``seed`` unless ``train.seed``
    is given explicitly.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    if "seed" not in raw.get("train", {}):
        cfg["train"]["seed"] = cfg["seed"]
    mode = cfg["train"]["mode"]
    if "heads" not in raw.get("train", {}).get("net", {}):
        cfg["train"]["net"]["heads"] = 1 if mode == "decomposition" else 2
    train_config(cfg).validate()
    tau = cfg["tau"]
    if not -1 < tau < 1:
        raise ConfigError(f"tau must lie in (-1, 1), got {tau}")
    data = cfg["data"]
    if data["n_identities"] < 2 or data["variations_per_identity"] < 1:
        raise ConfigError("data needs n_identities >= 2 and variations_per_identity >= 1")
    if not 0 < data["train_fraction"] < 1:
        raise ConfigError("data.train_fraction must lie in (0, 1)")
    return cfg


def train_config(cfg):
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def comparator_from(cfg):
    spec = cfg["comparator"]
    return get_comparator(spec["name"], **spec.get("options", {}))


# -- run directories ----------------------------------------------------------

def make_run_dir(cfg, command, run_dir=None):
    if run_dir is not None:
        path = Path(run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = Path(cfg["output_dir"]) / f"{command}-{stamp}-seed{cfg['seed']}"
        path, n = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{n}")
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_index(run_dir):
    """Write ``MANIFEST``: every file under the run directory with size and sha256."""
    run_dir = Path(run_dir)
    entries = []
    for f in sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "MANIFEST"):
        entries.append({"path": f.relative_to(run_dir).as_posix(),
                        "bytes": f.stat().st_size, "sha256": _sha256(f)})
    _write_json(run_dir / "MANIFEST", {"files": entries})
    return run_dir / "MANIFEST"


def checkpoint_digest(path):
    """One hash over a checkpoint's array digests, for reports."""
    with open(Path(path) / "manifest.json") as fh:
        entries = json.load(fh)["arrays"]
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e['name']}:{e['sha256']};".encode())
    return h.hexdigest()


# -- data -----------------------------------------------------------------------

def generated_samples(cfg):
    data = cfg["data"]
    res = cfg["train"]["net"]["resolution"]
    return generate_dataset(data["n_identities"], data["variations_per_identity"],
                            data["alphas"], res, cfg["seed"])


def split_from_records(samples, records, cfg):
    """Honour ``split`` fields from a manifest; otherwise build a scenario-1 split."""
    labels = [r.get("split") for r in records]
    if all(lbl in ("train", "test") for lbl in labels):
        train = [s for s, lbl in zip(samples, labels) if lbl == "train"]
        test = [s for s, lbl in zip(samples, labels) if lbl == "test"]
        pool = frozenset(i for s in train for i in s.pair)
        return DatasetSplit(train, test, pool).check()
    return build_scenario1_split(samples, cfg["data"]["train_fraction"], cfg["seed"])


def load_split(cfg, manifest=None):
    manifest = manifest or cfg["data"]["manifest"]
    if manifest:
        res = cfg["train"]["net"]["resolution"]
        records = read_manifest(manifest)
        samples = load_manifest_samples(manifest, res)
        if len(samples) != len(records):
            raise DataError("manifest records and loaded samples disagree")
        return split_from_records(samples, records, cfg)
    return build_scenario1_split(generated_samples(cfg), cfg["data"]["train_fraction"],
                                 cfg["seed"])


def decomposition_images(cfg, manifest=None):
    """Bonafide faces for decomposition mode, one per identity, in label order."""
    manifest = manifest or cfg["data"]["manifest"]
    if manifest:
        split = load_split(cfg, manifest)
        by_id = {}
        for s in split.train + split.test:
            by_id.setdefault(s.identity1, s.bonafide1)
            by_id.setdefault(s.identity2, s.bonafide2)
        return [by_id[i] for i in sorted(by_id)]
    res = cfg["train"]["net"]["resolution"]
    return [render_bonafide(p, 0, res)
            for p in identity_seeds(cfg["data"]["n_identities"], cfg["seed"])]


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg, out_dir):
    """Render the configured dataset to PNGs plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = generated_samples(cfg)
    split = build_scenario1_split(samples, cfg["data"]["train_fraction"], cfg["seed"])
    train_ids = {id(s) for s in split.train}
    records = []
    for n, s in enumerate(samples):
        names = [f"images/{n:04d}_{kind}.png" for kind in ("morph", "b1", "b2")]
        for name, img in zip(names, (s.morph, s.bonafide1, s.bonafide2)):
            save_png(img, out_dir / name)
        records.append({"morph_path": names[0], "bonafide1_path": names[1],
                        "bonafide2_path": names[2], "id1": s.identity1, "id2": s.identity2,
                        "alpha": s.alpha, "split": "train" if id(s) in train_ids else "test"})
    write_manifest(records, out_dir / "manifest.json")
    _write_json(out_dir / "config.json", cfg)
    write_index(out_dir)
    return out_dir / "manifest.json"


def cmd_train(cfg, data=None, resume=None, run_dir=None):
    tcfg = train_config(cfg).validate()
    run_dir = make_run_dir(cfg, "train", run_dir)
    _write_json(run_dir / "config.json", cfg)
    if tcfg.mode == "decomposition":
        report = train_decomposition(tcfg, decomposition_images(cfg, data), run_dir, resume)
    else:
        report = train_demorph(tcfg, load_split(cfg, data), run_dir, resume)
    _write_json(run_dir / "train_report.json", {
        "mode": tcfg.mode, "seed": report.seed, "epochs": len(report.losses),
        "initial_loss": report.losses[0], "final_loss": report.losses[-1],
        "checkpoint": str(report.checkpoint.relative_to(run_dir)),
        "intermediate_checkpoints": [str(p.relative_to(run_dir)) for p in report.checkpoints],
    })
    write_index(run_dir)
    log.info("trained %d epochs in %.1fs; run dir %s", len(report.losses), report.wall_clock,
             run_dir)
    return run_dir


def _grid(rows):
    return np.concatenate([np.concatenate(r, axis=2) for r in rows], axis=1)


def _caption(pairs):
    return "".join(f"{name}: {'N/A' if s is None else f'{s:.4f}'}\n" for name, s in pairs)


def _sim(comparator, a, b):
    return comparator.compare(a, b).similarity


def cmd_decompose(checkpoint, image_path, out_dir, comparator=None):
    dec, mer, _, _ = load_checkpoint(checkpoint)
    comparator = comparator or get_comparator("toy")
    image = load_png(image_path, dec.config.resolution)
    (components,), (recon,) = run_decomposition(dec, mer, [image])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(components, start=1):
        save_png(c, out_dir / f"component_{i}.png")
    save_png(recon, out_dir / "reconstruction.png")
    pairs = [(f"I{i} vs input", _sim(comparator, c, image))
             for i, c in enumerate(components, start=1)]
    pairs.append(("reconstruction vs input", _sim(comparator, recon, image)))
    (out_dir / "captions.txt").write_text(_caption(pairs))
    return out_dir


def cmd_demorph(checkpoint, image_path, out_dir, bonafides=None, comparator=None):
    dec, mer, _, _ = load_checkpoint(checkpoint)
    if dec.config.heads != 2:
        raise ModeError(f"demorph needs a two-head checkpoint, {checkpoint} has "
                        f"heads={dec.config.heads}")
    comparator = comparator or get_comparator("toy")
    res = dec.config.resolution
    morph = load_png(image_path, res)
    ((o1, o2, components),) = run_demorph(dec, mer, [morph])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(components, start=1):
        save_png(c, out_dir / f"component_{i}.png")
    save_png(o1, out_dir / "output_1.png")
    save_png(o2, out_dir / "output_2.png")
    pairs = [("O1 vs input", _sim(comparator, o1, morph)),
             ("O2 vs input", _sim(comparator, o2, morph)),
             ("O1 vs O2", _sim(comparator, o1, o2))]
    if bonafides:
        b1, b2 = (load_png(p, res) for p in bonafides)
        pairs += [("O1 vs B1", _sim(comparator, o1, b1)), ("O1 vs B2", _sim(comparator, o1, b2)),
                  ("O2 vs B1", _sim(comparator, o2, b1)), ("O2 vs B2", _sim(comparator, o2, b2))]
    (out_dir / "captions.txt").write_text(_caption(pairs))
    return out_dir


def _both_match(comparator, outputs, image, tau):
    sims = [comparator.compare(o, image).similarity for o in outputs]
    return all(s is not None and s > tau for s in sims)


def evaluate_demorph(dec, mer, split, comparator, tau):
    report = {"mode": "demorphing"}
    results = {}
    for name, samples in (("test", split.test), ("train", split.train)):
        if not samples:
            report[f"restoration_{name}"] = None
            continue
        outputs = run_demorph(dec, mer, [s.morph for s in samples])
        acc1, acc2, records = restoration_accuracy(
            [(o1, o2, s.bonafide1, s.bonafide2) for (o1, o2, _), s in zip(outputs, samples)],
            comparator, tau)
        report[f"restoration_{name}"] = {
            "count": len(samples), "subject1": acc1, "subject2": acc2,
            "not_found": sum(bool(r.not_found) for r in records)}
        results[name] = (samples, outputs, records)
    everything = split.train + split.test
    report["morph_attack_match"] = {
        "bonafide1": match_accuracy([(s.morph, s.bonafide1) for s in everything], comparator, tau),
        "bonafide2": match_accuracy([(s.morph, s.bonafide2) for s in everything], comparator, tau),
    }
    # image quality of the outputs against their assigned bonafides
    samples, outputs, records = results.get("test") or results["train"]
    refs, outs = [], []
    for (o1, o2, _), s, r in zip(outputs, samples, records):
        refs += [s.bonafide1, s.bonafide2]
        outs += [o1, o2] if r.pairing == "natural" else [o2, o1]
    q = iqa(refs, outs)
    report["iqa"] = {"ssim": q.ssim, "psnr": q.psnr, "fid": q.fid, "fid_embedder": q.embedder}
    faces = {}
    for s in everything:
        faces.setdefault(s.identity1, s.bonafide1)
        faces.setdefault(s.identity2, s.bonafide2)
    bonafides = [faces[i] for i in sorted(faces)]
    duplicates = [_both_match(comparator, (o1, o2), b, tau)
                  for (o1, o2, _), b in zip(run_demorph(dec, mer, bonafides), bonafides)]
    report["non_morph_duplicate_rate"] = {"count": len(duplicates),
                                          "rate": float(np.mean(duplicates))}
    grid = [[s.morph, *comps, o1, o2, s.bonafide1, s.bonafide2]
            for s, (o1, o2, comps) in list(zip(samples, outputs))[:GRID_ROWS]]
    return report, grid


def evaluate_decomposition(dec, mer, images, comparator, tau):
    comps, recon = run_decomposition(dec, mer, images)
    leak = component_leakage(dec, mer, images, comparator, tau)
    q = iqa(images, recon)
    report = {
        "mode": "decomposition",
        "count": len(images),
        "reconstruction_match": leak.reconstruction_rate,
        "reconstruction_match_na_removed": leak.reconstruction_rate_na_removed,
        "leakage": [{"component": i + 1, "leak_rate": r, "leak_rate_na_removed": rn}
                    for i, (r, rn) in enumerate(zip(leak.rates, leak.rates_na_removed))],
        "not_found": leak.not_found,
        "mean_l1_reconstruction": float(np.mean([np.abs(a - r).mean()
                                                  for a, r in zip(images, recon)])),
        "mean_l1_components": [float(np.mean([np.abs(a - c[i]).mean()
                                              for a, c in zip(images, comps)]))
                               for i in range(len(comps[0]))],
        "iqa": {"ssim": q.ssim, "psnr": q.psnr, "fid": q.fid, "fid_embedder": q.embedder},
    }
    grid = [[img, *c, r] for img, c, r in list(zip(images, comps, recon))[:GRID_ROWS]]
    return report, grid


def cmd_evaluate(cfg, checkpoint, data=None, run_dir=None):
    """Evaluate a checkpoint; returns ``(run_dir, report)``."""
    mode = cfg["train"]["mode"]
    dec, mer, snapshot, _ = load_checkpoint(checkpoint)
    heads = dec.config.heads
    if (mode == "decomposition") != (heads == 1):
        raise ModeError(f"config mode {mode!r} does not fit a checkpoint with heads={heads}")
    trained_mode = snapshot.get("train", {}).get("mode")
    if trained_mode is not None and trained_mode != mode:
        raise ModeError(f"checkpoint was trained in {trained_mode!r} mode, config says {mode!r}")
    comparator = comparator_from(cfg)
    tau = cfg["tau"]
    if mode == "decomposition":
        report, grid = evaluate_decomposition(dec, mer, decomposition_images(cfg, data),
                                              comparator, tau)
    else:
        report, grid = evaluate_demorph(dec, mer, load_split(cfg, data), comparator, tau)
    report["comparator"] = comparator.describe()
    report["tau"] = tau
    report["checkpoint_sha256"] = checkpoint_digest(checkpoint)
    run_dir = make_run_dir(cfg, "evaluate", run_dir)
    _write_json(run_dir / "config.json", cfg)
    _write_json(run_dir / "report.json", report)
    if grid:
        save_png(_grid(grid), run_dir / "grid.png")
    write_index(run_dir)
    return run_dir, report


# -- entry point ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="demorph", description="Decomposition and reference-free demorphing experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train in the configured mode")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="manifest.json to train on instead of generated data")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--run-dir")

    for name in ("decompose", "demorph"):
        p = sub.add_parser(name, help=f"{name} one image")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="config selecting the comparator for captions")
        if name == "demorph":
            p.add_argument("--bonafides", nargs=2, metavar=("B1", "B2"))

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="manifest.json to evaluate on")
    p.add_argument("--run-dir")
    return parser


def run(args):
    if args.command == "gen-data":
        return cmd_gen_data(load_config(args.config), args.out)
    if args.command == "train":
        return cmd_train(load_config(args.config), args.data, args.resume, args.run_dir)
    comparator = comparator_from(load_config(args.config)) if getattr(args, "config", None) else None
    if args.command == "decompose":
        return cmd_decompose(args.checkpoint, args.image, args.out, comparator)
    if args.command == "demorph":
        return cmd_demorph(args.checkpoint, args.image, args.out, args.bonafides, comparator)
    run_dir, _ = cmd_evaluate(load_config(args.config), args.checkpoint, args.data, args.run_dir)
    return run_dir / "report.json"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except DemorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
