"""Command-line front end: ``somnograph synth|train|eval|predict|occlude|features``.

Every command takes ``--config <json>``; ``--seed`` and ``--out`` override the
matching config entries. Failures print one JSON line on stderr and exit
non-zero.
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import evaluation as ev
from .features import FeatureBaseline, extract_features, write_features_csv
from .model import (
    ModelConfig,
    MultivariateNet,
    TrainSpec,
    load_model,
    predict_record,
    save_model,
    train_stage1,
    train_stage2,
)
from .preprocess import order_channels, preprocess_record
from .signal_io import list_edf, make_markov_record, make_synthetic_record, read_edf, split_records, write_edf
from .stages import BAND_NAMES, EPOCH_SECONDS, STAGE_NAMES

logger = logging.getLogger("somnograph")

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "data_dir": {"type": "string"},
        "out_dir": {"type": "string"},
        "checkpoint": {"type": ["string", "null"]},
        "modality_overrides": {"type": "object", "additionalProperties": {"enum": ["EEG", "EOG", "EMG", "OTHER"]}},
        "channels": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "string"}, "minItems": 1},
                {"type": "array", "items": {"type": "array", "items": {"type": "string"}, "minItems": 1}, "minItems": 1},
            ]
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_records": {"type": "integer", "minimum": 1},
                "n_epochs_per_class": {"type": "integer", "minimum": 1},
                "rate_hz": {"type": "number", "exclusiveMinimum": 0},
                "channels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "markov": {"type": "boolean"},
                "markov_epochs": {"type": "integer", "minimum": 1},
                "stay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target_rate": {"type": "number", "exclusiveMinimum": 0},
                "cutoff_hz": {"type": "number", "exclusiveMinimum": 0},
                "transition_hz": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_train": {"type": "integer", "minimum": 1},
                "n_val": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {
                    "oneOf": [
                        {"type": "integer", "minimum": 0},
                        {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                    ]
                },
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "virtual_eeg": {"type": ["integer", "null"], "minimum": 1},
                "virtual_emg": {"type": ["integer", "null"], "minimum": 1},
                "dtype": {"enum": ["float32", "float64"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "balanced": {"type": "boolean"},
                "steps_per_epoch": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "bands": {"type": "array", "items": {"enum": list(BAND_NAMES)}},
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"baseline": {"type": "boolean"}},
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "data_dir": "data",
    "out_dir": "out",
    "checkpoint": None,
    "modality_overrides": {},
    "channels": None,
    "synth": {
        "n_records": 3,
        "n_epochs_per_class": 20,
        "rate_hz": 256.0,
        "channels": ["EEG Fpz-Cz", "EEG Pz-Oz"],
        "markov": False,
        "markov_epochs": 100,
        "stay": 0.9,
    },
    "preprocess": {"target_rate": 128.0, "cutoff_hz": 30.0, "transition_hz": 7.0},
    "split": {"n_train": 1, "n_val": 1, "n_test": 1},
    "model": {"k": 0, "dropout": 0.5, "virtual_eeg": None, "virtual_emg": None, "dtype": "float32"},
    "train": {"batch_size": 128, "max_epochs": 100, "patience": 5, "balanced": True, "steps_per_epoch": None},
    "bands": list(BAND_NAMES),
    "features": {"baseline": False},
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, out=None):
    """Validate a JSON config against the schema and resolve defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out_dir"] = out
    base = Path(path).parent if path is not None else Path.cwd()
    for key in ("data_dir", "out_dir", "checkpoint"):
        if cfg[key] is not None and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key]) if key != "out_dir" or out is None else cfg[key]
    return cfg


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sub_seeds(seed, n=4):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# data loading


def _load_records(cfg):
    paths = list_edf(cfg["data_dir"])
    if not paths:
        raise ConfigError(f"no EDF files in {cfg['data_dir']}")
    return {p.stem: read_edf(p, modality_overrides=cfg["modality_overrides"]) for p in paths}


def _split(cfg, ids):
    sp = cfg["split"]
    split_seed = _sub_seeds(cfg["seed"])[0]
    return split_records(sorted(ids), sp["n_train"], sp["n_val"], sp["n_test"], split_seed)


def _channel_sets(cfg, records):
    ch = cfg["channels"]
    if ch is None:
        first = next(iter(records.values()))
        return [order_channels(first)[0]]
    if isinstance(ch[0], str):
        return [ch]
    return ch


def _k_values(cfg):
    k = cfg["model"]["k"]
    return [k] if isinstance(k, int) else list(k)


def _preprocess(cfg, records, ids, channels, band=None, standardized=True):
    pp = cfg["preprocess"]
    return [
        preprocess_record(records[i], pp["target_rate"], pp["cutoff_hz"], pp["transition_hz"],
                          band=band, channels=channels, standardized=standardized)
        for i in ids
    ]


def _cells(cfg, records):
    """Sweep cells as (directory, channel-set index, channels, k).

    A single cell writes straight into out_dir; a sweep gets one
    sub-directory per (channel set, k) pair.
    """
    channel_sets = _channel_sets(cfg, records)
    ks = _k_values(cfg)
    out = Path(cfg["out_dir"])
    sweep = len(channel_sets) > 1 or len(ks) > 1
    return [
        (out / f"ch{j}_k{k}" if sweep else out, j, chans, k)
        for j, chans in enumerate(channel_sets)
        for k in ks
    ]


def _checkpoint_name(k):
    return f"checkpoint_k{k}.json"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    sy = cfg["synth"]
    out = Path(cfg["data_dir"] if cfg.get("_out_cli") is None else cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(_sub_seeds(cfg["seed"])[3]).spawn(sy["n_records"])
    written = []
    for i, s in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(s))
        name = f"synth_{i:03d}"
        if sy["markov"]:
            rec = make_markov_record(sy["markov_epochs"], sy["channels"], rng, stay=sy["stay"],
                                     rate_hz=sy["rate_hz"], subject_id=name)
        else:
            rec = make_synthetic_record(sy["n_epochs_per_class"], sy["channels"], rng,
                                        rate_hz=sy["rate_hz"], subject_id=name)
        path = out / f"{name}.edf"
        write_edf(rec, path)
        written.append(str(path))
    logger.info("wrote %d records to %s", len(written), out)
    return {"records": written}


def cmd_train(cfg):
    records = _load_records(cfg)
    train_ids, val_ids, test_ids = _split(cfg, records)
    _, model_seed, train_seed, _ = _sub_seeds(cfg["seed"])
    cells = _cells(cfg, records)
    m, t = cfg["model"], cfg["train"]
    spec = TrainSpec(batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
                     seed=train_seed, balanced=t["balanced"], steps_per_epoch=t["steps_per_epoch"])
    n_times = int(round(EPOCH_SECONDS * cfg["preprocess"]["target_rate"]))
    outputs = []
    bases = {}
    for cell_dir, j, chans, k in cells:
        cell_dir.mkdir(parents=True, exist_ok=True)
        train_sets = _preprocess(cfg, records, train_ids, chans)
        val_sets = _preprocess(cfg, records, val_ids, chans)
        if j not in bases:
            split = train_sets[0].modality_split
            mcfg = ModelConfig(n_eeg=split, n_emg=len(chans) - split, n_times=n_times,
                               virtual_eeg=m["virtual_eeg"], virtual_emg=m["virtual_emg"],
                               dropout=m["dropout"], seed=model_seed, dtype=m["dtype"])
            # stage 1 does not depend on k, so cells sharing channels share it
            bases[j] = train_stage1(MultivariateNet(mcfg), train_sets, val_sets, spec)
        base, history = bases[j]
        _write_history(cell_dir / "history_k0.jsonl", history)
        save_model(cell_dir / _checkpoint_name(0), base)
        outputs.append(str(cell_dir / _checkpoint_name(0)))
        if k > 0:
            td, h2 = train_stage2(base, k, train_sets, val_sets, spec)
            _write_history(cell_dir / f"history_k{k}.jsonl", h2)
            save_model(cell_dir / _checkpoint_name(k), td)
            outputs.append(str(cell_dir / _checkpoint_name(k)))
        _write_json(cell_dir / "split.json", {"train": train_ids, "val": val_ids, "test": test_ids})
        _write_json(cell_dir / "cell.json", {"channels": chans, "k": k, "model": base.config.to_dict()})
    return {"checkpoints": outputs}


def _write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _resolve_checkpoints(cfg, records):
    """(cell_dir, channels, checkpoint path) for each model to evaluate."""
    cells = _cells(cfg, records)
    if cfg["checkpoint"] is not None:
        return [(Path(cfg["out_dir"]), cells[0][2], Path(cfg["checkpoint"]))]
    return [(cell_dir, chans, cell_dir / _checkpoint_name(k)) for cell_dir, _, chans, k in cells]


def _suffix(path):
    return Path(path).stem.replace("checkpoint", "").lstrip("_")


def cmd_eval(cfg):
    records = _load_records(cfg)
    _, _, test_ids = _split(cfg, records)
    if not test_ids:
        raise ConfigError("the split has no test records")
    results = []
    for cell_dir, chans, ckpt in _resolve_checkpoints(cfg, records):
        net = _load_checkpoint(ckpt)
        tag = _suffix(ckpt)
        sets = _preprocess(cfg, records, test_ids, chans)
        trues, preds, per_subject = [], [], []
        trans_true, trans_pred = [], []
        for es in sets:
            hyp, _ = predict_record(net, es)
            trues.append(es.labels)
            preds.append(hyp.stages)
            rep = ev.compute_metrics(es.labels, hyp.stages)
            per_subject.append({"subject": es.subject_id, "balanced_accuracy": rep.balanced_accuracy,
                                "accuracy": rep.accuracy, "cohen_kappa": rep.cohen_kappa,
                                "fragmentation_index": rep.fragmentation_index})
            if len(es) >= 2:
                trans_true.append(ev.transition_matrix(es.labels))
                trans_pred.append(ev.transition_matrix(hyp.stages))
        y, p = np.concatenate(trues), np.concatenate(preds)
        report = ev.compute_metrics(y, p)
        doc = report.to_dict()
        doc["per_subject"] = per_subject
        doc["checkpoint"] = str(ckpt)
        doc["k"] = net.k
        ev.write_metrics_json(cell_dir / f"metrics_{tag}.json", doc)
        ev.write_matrix_csv(cell_dir / f"confusion_{tag}.csv",
                            ev.averaged_confusion(list(zip(trues, preds))))
        ev.write_matrix_csv(cell_dir / f"confusion_counts_{tag}.csv", ev.confusion_matrix(y, p), fmt="{:d}")
        if trans_true:
            ev.write_matrix_csv(cell_dir / f"transition_true_{tag}.csv", np.mean(trans_true, axis=0))
            ev.write_matrix_csv(cell_dir / f"transition_pred_{tag}.csv", np.mean(trans_pred, axis=0))
        results.append({"checkpoint": str(ckpt), "balanced_accuracy": report.balanced_accuracy})
    return {"results": results}


def _load_checkpoint(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found; run `somnograph train` first")
    return load_model(path)


def cmd_predict(cfg):
    records = _load_records(cfg)
    _, _, test_ids = _split(cfg, records)
    written = []
    for cell_dir, chans, ckpt in _resolve_checkpoints(cfg, records):
        net = _load_checkpoint(ckpt)
        pred_dir = cell_dir / f"predictions_{_suffix(ckpt)}"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for es in _preprocess(cfg, records, sorted(records), chans):
            hyp, prob = predict_record(net, es)
            (pred_dir / f"{es.subject_id}.hypnogram.txt").write_text(
                "".join(t + "\n" for t in hyp.tokens()), encoding="utf-8")
            np.savetxt(pred_dir / f"{es.subject_id}.proba.csv", prob, delimiter=",",
                       header=",".join(STAGE_NAMES), comments="", fmt="%.9g")
            written.append(str(pred_dir / f"{es.subject_id}.hypnogram.txt"))
    return {"predictions": written, "test_records": test_ids}


def cmd_occlude(cfg):
    records = _load_records(cfg)
    _, _, test_ids = _split(cfg, records)
    if not test_ids:
        raise ConfigError("the split has no test records")
    pp = cfg["preprocess"]
    outputs = []
    for cell_dir, chans, ckpt in _resolve_checkpoints(cfg, records):
        net = _load_checkpoint(ckpt)
        tag = _suffix(ckpt)
        recs = [records[i].select(chans) for i in test_ids]
        for band in [None] + list(cfg["bands"]):
            cm = ev.occlusion_probe(net, recs, band, target_rate=pp["target_rate"],
                                    cutoff_hz=pp["cutoff_hz"], transition_hz=pp["transition_hz"])
            path = cell_dir / f"occlusion_{band or 'unfiltered'}_{tag}.csv"
            ev.write_matrix_csv(path, cm, fmt="{:d}")
            outputs.append(str(path))
    return {"occlusion": outputs}


def cmd_features(cfg):
    records = _load_records(cfg)
    chans = _channel_sets(cfg, records)[0]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(records)
    sets = _preprocess(cfg, records, ids, chans, standardized=False)
    blocks = [extract_features(s) for s in sets]
    names = blocks[0][1]
    values = np.concatenate([b[0] for b in blocks])
    labels = np.concatenate([s.labels for s in sets])
    write_features_csv(out / "features.csv", values, names, labels)
    result = {"features": str(out / "features.csv"), "n_epochs": int(len(values)), "n_columns": len(names)}
    if cfg["features"]["baseline"]:
        result["baseline"] = _feature_baseline(cfg, ids, blocks, sets, out)
    return result


def _feature_baseline(cfg, ids, blocks, sets, out):
    train_ids, val_ids, test_ids = _split(cfg, ids)
    by_id = {i: (b[0], s.labels) for i, b, s in zip(ids, blocks, sets)}

    def stack(group):
        return (np.concatenate([by_id[i][0] for i in group]), np.concatenate([by_id[i][1] for i in group]))

    xt, yt = stack(train_ids)
    xv, yv = stack(val_ids)
    t = cfg["train"]
    spec = TrainSpec(batch_size=t["batch_size"], max_epochs=t["max_epochs"], patience=t["patience"],
                     seed=_sub_seeds(cfg["seed"])[2], balanced=t["balanced"], steps_per_epoch=t["steps_per_epoch"])
    model = FeatureBaseline(xt.shape[1], seed=_sub_seeds(cfg["seed"])[1])
    model.fit(xt, yt, xv, yv, spec)
    doc = {}
    if test_ids:
        xs, ys = stack(test_ids)
        doc = ev.compute_metrics(ys, model.predict(xs)).to_dict()
    ev.write_metrics_json(out / "features_baseline_metrics.json", doc)
    return str(out / "features_baseline_metrics.json")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "occlude": cmd_occlude,
    "features": cmd_features,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="somnograph", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed, overrides the config")
    parser.add_argument("--out", help="output directory, overrides out_dir")
    parser.add_argument("--max-epochs", type=int, help="overrides train.max_epochs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None):
    """Parse `argv`, run the command and return its result dict."""
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.max_epochs is not None:
        if args.max_epochs < 0:
            raise ConfigError("--max-epochs must be non-negative")
        cfg["train"]["max_epochs"] = args.max_epochs
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = dict(cfg)
    _write_json(out_dir / f"effective_config_{args.command}.json", effective)
    if args.out is not None:
        cfg["_out_cli"] = args.out
    return COMMANDS[args.command](cfg)


def main(argv=None):
    args = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if ("-v" in args or "--verbose" in args) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except SystemExit:
        raise
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
