"""Command-line entry points.

Every command resolves its configuration (defaults <- ``--config`` file <-
``--set`` overrides <- dedicated flags) and writes the result to
``<out>/config.<command>.yaml`` before producing anything else.  Feeding that
file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, dataio, domainmaps as dm
from .bench import ExperimentConfig
from .model import EncoderConfig, random_bundle
from .training import PretrainConfig, pev_similarity_stats, toy_pretrain

log = logging.getLogger("uwbdar")

COMMANDS = ("simulate", "preprocess", "pretrain", "train", "adapt-fewshot", "eval", "ablate", "ingest")


def _experiment_defaults() -> dict:
    d = ExperimentConfig().to_dict()
    d.pop("seeds")
    return d


DEFAULTS: dict = {
    "seed": 0,
    "runs": 3,
    "data": {
        "manifest": None,
        "n_subjects": 6,
        "per_class": 6,
        "shot_pool": 30,
        "shot_labels": ["Relax"],
        "window_s": 5.0,
        "seed": 0,
        "library": {},
    },
    "bundle": {
        "source": "toy",  # toy | random | path to a .uwbb file
        "d": 64,
        "layers": 2,
        "heads": 4,
        "mlp_ratio": 4.0,
        "pretrain": {"n_images": 2400, "epochs": 4, "batch": 32, "lr": 1e-3},
    },
    "experiment": _experiment_defaults(),
    "grid": {},
    "ingest": {"mapping": {}},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed; runs use seed, seed+1, ...")
    common.add_argument("--config", type=Path, help="YAML file with configuration overrides")
    common.add_argument("--out", type=Path, default=Path("uwbdar-out"), help="output directory")
    common.add_argument("--adapt", choices=bench.AXES["adapt"], help="input adaptation strategy")
    common.add_argument("--domain", choices=bench.AXES["domain"], help="input domain")
    common.add_argument("--fusion", choices=bench.AXES["fusion"],
                        help="fusion design (default: ViT range branch + lightweight frequency extractor)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. data.per_class=2 (value parsed as YAML)")
    p = _Parser(prog="uwbdar", description="Driver activity recognition on IR-UWB radar maps.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("preprocess", parents=[common], help="write range, frequency and range-Doppler maps")
    sub.add_parser("pretrain", parents=[common], help="toy pre-training of an encoder bundle")
    sub.add_parser("train", parents=[common], help="train one model per leave-one-subject-out fold")
    a = sub.add_parser("adapt-fewshot", parents=[common], help="adapt trained fold models with held-out shots")
    a.add_argument("--shots", type=int, help="shots per held-out subject")
    e = sub.add_parser("eval", parents=[common], help="score trained (or adapted) fold models")
    e.add_argument("--shots", type=int, help="evaluate the models adapted with this many shots")
    ab = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    ab.add_argument("--grid", action="append", default=[], metavar="AXIS=V1,V2,...",
                    help=f"axis values; axes: {', '.join(bench.AXES)}")
    ing = sub.add_parser("ingest", parents=[common], help="convert external recordings")
    ing.add_argument("source", type=Path, help="directory of external recordings")
    ing.add_argument("--mapping", type=Path, help="YAML mapping config (file naming, labels, layout)")
    return p


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, where="config") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown {where} key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("library", "mapping", "grid"):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        # YAML 1.1 reads "1e-5" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def resolve(args, start: dict | None = None) -> dict:
    cfg = copy.deepcopy(start if start is not None else DEFAULTS)
    if args.config is not None:
        try:
            loaded = yaml.safe_load(args.config.read_text()) or {}
        except OSError as exc:
            raise dataio.DataError(f"cannot read config {args.config}: {exc}") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"config {args.config} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a mapping")
        loaded.pop("resolved_by", None)
        cfg = _merge(cfg, loaded)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node and parts[0] not in ("grid",) and parts[-2:-1] not in (["library"], ["mapping"]):
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag in ("adapt", "domain", "fusion"):
        v = getattr(args, flag)
        if v is not None:
            cfg["experiment"][flag] = v
    if getattr(args, "shots", None) is not None:
        cfg["experiment"]["shots"] = args.shots
    for item in getattr(args, "grid", []):
        axis, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"--grid expects AXIS=V1,V2,..., got {item!r}")
        if axis not in bench.AXES:
            raise UsageError(f"unknown grid axis {axis!r}; choose from {', '.join(bench.AXES)}")
        cfg["grid"][axis] = [_parse_value(v) for v in values.split(",")]
    return cfg


def experiment_config(cfg: dict) -> ExperimentConfig:
    e = dict(cfg["experiment"])
    e["seeds"] = tuple(int(cfg["seed"]) + i for i in range(int(cfg["runs"])))
    try:
        return ExperimentConfig.from_dict(e)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment config: {exc}") from None


def _write_config(out: Path, command: str, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"config.{command}.yaml"
    path.write_text(yaml.safe_dump({**cfg, "resolved_by": command}, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# shared steps


def _corpus(cfg: dict):
    d = cfg["data"]
    if d["manifest"]:
        return dataio.load_corpus(d["manifest"])
    return bench.synthetic_corpus(n_subjects=d["n_subjects"], per_class=d["per_class"], shot_pool=d["shot_pool"],
                                  shot_labels=tuple(d["shot_labels"]), window_s=d["window_s"], seed=d["seed"],
                                  library=d["library"])


def _pretrain(cfg: dict):
    b = cfg["bundle"]
    enc = EncoderConfig(d=b["d"], layers=b["layers"], heads=b["heads"], mlp_ratio=b["mlp_ratio"], seed=cfg["seed"])
    p = b["pretrain"]
    pcfg = PretrainConfig(n_images=p["n_images"], epochs=p["epochs"], batch=p["batch"], lr=p["lr"], seed=cfg["seed"])
    return toy_pretrain(enc, pcfg)


def _bundle(cfg: dict, out: Path):
    b = cfg["bundle"]
    src = b["source"]
    if src == "random":
        enc = EncoderConfig(d=b["d"], layers=b["layers"], heads=b["heads"], mlp_ratio=b["mlp_ratio"], seed=cfg["seed"])
        return random_bundle(enc, seed=cfg["seed"])
    if src == "toy":
        existing = out / "bundle.uwbb"
        if existing.exists():
            return dataio.load_bundle(existing)
        bundle, _, _ = _pretrain(cfg)
        dataio.save_bundle(bundle, existing)
        return bundle
    return dataio.load_bundle(src)


def _model_dir(out: Path, shots: int) -> Path:
    return out / ("models" if shots == 0 else f"models_shots{shots}")


def _folds(corpus, exp: ExperimentConfig):
    c = corpus.for_window(exp.window)
    plan = bench.make_loso_splits(c.sample_ids, c.subjects, c.reserved)
    for si, seed in enumerate(exp.seeds):
        for held_out in bench._folds_for_seed(plan.subjects, si, exp.folds_per_seed):
            yield c, plan, seed, held_out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out: Path):
    corpus = _corpus({**cfg, "data": {**cfg["data"], "manifest": None}})
    path = dataio.save_corpus(corpus, out / "data")
    print(f"wrote {len(corpus)} recordings, manifest {path}")


def cmd_preprocess(cfg, out: Path):
    corpus = _corpus(cfg)
    exp = experiment_config(cfg)
    corpus = corpus.for_window(exp.window)
    entries = []
    for kind in ("range", "freq", "range-doppler"):
        maps = corpus.maps(kind, exp.crop, exp.band)
        (out / "maps" / kind).mkdir(parents=True, exist_ok=True)
        mkind = {"range": dm.RANGE_TIME, "freq": dm.FREQUENCY_TIME, "range-doppler": dm.RANGE_DOPPLER}[kind]
        for p, m in zip(corpus.pulses, maps):
            rel = Path("maps") / kind / f"{p.sample_id}.uwbs"
            dataio.save_sample(dataio.SampleRecord(mkind, m, p.label_code, p.subject_id), out / rel)
            entries.append(dataio.ManifestEntry(rel.as_posix(), p.label, p.subject_id, p.frame_rate, p.sample_id,
                                                f"kind={kind};crop={exp.crop};band={exp.band}"))
    dataio.write_manifest(entries, out / "maps_manifest.tsv")
    print(f"wrote {len(entries)} maps, manifest {out / 'maps_manifest.tsv'}")


def cmd_pretrain(cfg, out: Path):
    bundle, trace, acc = _pretrain(cfg)
    dataio.save_bundle(bundle, out / "bundle.uwbb")
    summary = {"accuracy": acc, "loss": trace, "pev_similarity": pev_similarity_stats(bundle.pev),
               "provenance": bundle.provenance}
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"toy pre-training accuracy {acc:.3f}; bundle {out / 'bundle.uwbb'}")


def cmd_train(cfg, out: Path):
    corpus = _corpus(cfg)
    exp = experiment_config(cfg)
    bundle = _bundle(cfg, out)
    factory = bench.default_factory(bundle)
    mdir = _model_dir(out, 0)
    mdir.mkdir(parents=True, exist_ok=True)
    from .training import train

    labels = None
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for c, plan, seed, held_out in _folds(corpus, exp):
            labels = c.labels
            pos = c.index()
            tr = np.array([pos[i] for i in plan.fold(held_out).train_ids])
            x, branches = bench.prepare_inputs(c, exp, tr)
            model, trace = train(factory(exp, branches, seed), x, labels[tr], exp.train_config(), seed=seed)
            dataio.save_model(model, mdir / f"seed{seed}_fold{held_out}.uwbm",
                              {"seed": seed, "held_out": int(held_out), "provenance": bundle.provenance})
            fh.write(json.dumps({"seed": seed, "held_out": int(held_out), "loss": trace}) + "\n")
            print(f"seed {seed} fold {held_out}: final loss {trace[-1]:.4f}")


def _load_models(mdir: Path, exp: ExperimentConfig, corpus):
    found = {}
    for c, plan, seed, held_out in _folds(corpus, exp):
        path = mdir / f"seed{seed}_fold{held_out}.uwbm"
        if not path.exists():
            raise dataio.DataError(f"missing model {path}; run train (and adapt-fewshot) on this out-dir first")
        found[(seed, held_out)] = dataio.load_model(path)
    return found


def cmd_adapt_fewshot(cfg, out: Path):
    corpus = _corpus(cfg)
    exp = experiment_config(cfg)
    if exp.shots < 1:
        raise UsageError("adapt-fewshot needs --shots >= 1")
    models = _load_models(_model_dir(out, 0), exp, corpus)
    from .training import few_shot_adapt

    mdir = _model_dir(out, exp.shots)
    mdir.mkdir(parents=True, exist_ok=True)
    for c, plan, seed, held_out in _folds(corpus, exp):
        pos = c.index()
        shots = bench._shot_ids(c, held_out, exp.shots, seed)
        fold = bench.with_shots(plan.fold(held_out), shots, plan.subject_of)
        sh = np.array([pos[i] for i in fold.shot_ids])
        x, _ = bench.prepare_inputs(c, exp, sh)
        model, meta = models[(seed, held_out)]
        adapted, _ = few_shot_adapt(model, x, c.labels[sh], exp.train_config(), seed=seed)
        dataio.save_model(adapted, mdir / f"seed{seed}_fold{held_out}.uwbm",
                          {**meta, "shots": list(fold.shot_ids)})
        print(f"seed {seed} fold {held_out}: adapted on {len(sh)} shots")


def cmd_eval(cfg, out: Path):
    corpus = _corpus(cfg)
    exp = experiment_config(cfg)
    models = _load_models(_model_dir(out, exp.shots), exp, corpus)
    preds, trues, seed_acc = [], [], {}
    for c, plan, seed, held_out in _folds(corpus, exp):
        pos = c.index()
        fold = bench.with_shots(plan.fold(held_out), bench._shot_ids(c, held_out, exp.shots, seed), plan.subject_of)
        te = np.array([pos[i] for i in fold.test_ids])
        x, _ = bench.prepare_inputs(c, exp, te)
        model, meta = models[(seed, held_out)]
        p = model.predict(x)
        preds.append(p)
        trues.append(c.labels[te])
        seed_acc.setdefault(seed, []).append((p == c.labels[te]))
    provenance = next(iter(models.values()))[1].get("provenance", "")
    per_seed = [float(np.concatenate(v).mean()) for v in seed_acc.values()]
    report = bench.score(np.concatenate(preds), np.concatenate(trues),
                         fingerprint=bench.config_fingerprint(cfg), seed=exp.seeds[0],
                         extras={"config": exp.to_dict(), "seed_accuracy": per_seed, "provenance": provenance})
    dataio.write_reports([report], out / "eval_report.jsonl", append=False)
    (out / "eval_confusion.txt").write_text(report.confusion_text())
    (out / "eval_summary.txt").write_text(_summary(report))
    print(_summary(report), end="")


def _summary(r: bench.EvalReport) -> str:
    lines = [f"accuracy {r.accuracy:.4f}  binary distracted accuracy {r.binary_distracted_accuracy:.4f}  n={r.n}",
             f"binary mapping: {bench.BINARY_MAPPING}",
             f"{'label':<8} {'precision':>9} {'recall':>7} {'f1':>7}"]
    for i, lab in enumerate(r.labels):
        flag = " (never predicted)" if i in r.zero_precision else ""
        lines.append(f"{lab:<8} {r.precision[i]:9.4f} {r.recall[i]:7.4f} {r.f1[i]:7.4f}{flag}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg, out: Path):
    if not cfg["grid"]:
        raise UsageError("ablate needs at least one --grid AXIS=V1,V2,...")
    corpus = _corpus(cfg)
    exp = experiment_config(cfg)
    bundle = _bundle(cfg, out)
    path = out / "ablation.jsonl"
    if path.exists():
        path.unlink()
    reports = bench.run_ablation(cfg["grid"], corpus, bench.default_factory(bundle), exp, report_path=path,
                                 provenance=bundle.provenance, notice=lambda m: print(f"notice: {m}"))
    (out / "ablation_table.txt").write_text(bench.format_table(reports))
    for i, r in enumerate(reports):
        (out / f"ablation_confusion_{i}.txt").write_text(r.confusion_text())
    print(bench.format_table(reports), end="")
    trends = {json.dumps(r.extras["trend"], sort_keys=True) for r in reports if "trend" in r.extras}
    for t in trends:
        t = json.loads(t)
        print(f"trend over {t['axis']}: kendall tau {t['kendall_tau']:.3f}, non-decreasing {t['non_decreasing']}")


def cmd_ingest(cfg, out: Path, source: Path, mapping_path: Path | None):
    mapping = dict(cfg["ingest"]["mapping"])
    if mapping_path is not None:
        try:
            loaded = yaml.safe_load(mapping_path.read_text()) or {}
        except OSError as exc:
            raise dataio.DataError(f"cannot read mapping {mapping_path}: {exc}") from None
        mapping.update(loaded)
    cfg["ingest"]["mapping"] = mapping
    _write_config(out, "ingest", cfg)
    res = dataio.ingest_alert(source, out, mapping)
    print(f"converted {len(res.entries)} files, skipped {len(res.skipped)}; manifest {res.manifest_path}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        out = args.out
        start = None
        if args.command in ("adapt-fewshot", "eval") and args.config is None:
            # continue from the configuration that trained the models
            prev = out / "config.train.yaml"
            if prev.exists():
                start = _merge(DEFAULTS, {k: v for k, v in yaml.safe_load(prev.read_text()).items()
                                          if k != "resolved_by"})
        cfg = resolve(args, start)
        experiment_config(cfg)  # validate early
        if args.command == "ingest":
            cmd_ingest(cfg, out, args.source, args.mapping)
            return 0
        _write_config(out, args.command, cfg)
        {
            "simulate": cmd_simulate,
            "preprocess": cmd_preprocess,
            "pretrain": cmd_pretrain,
            "train": cmd_train,
            "adapt-fewshot": cmd_adapt_fewshot,
            "eval": cmd_eval,
            "ablate": cmd_ablate,
        }[args.command](cfg, out)
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (dataio.DataError, bench.SplitError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
