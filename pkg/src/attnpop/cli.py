"""Command-line surface tying the pieces into reproducible runs.

Every knob resolves in one place (defaults, then the ATTNPOP_SEED
environment variable, then the --config file, then explicit flags) and
the resolved view is echoed into every emitted document, so any output
names the exact configuration that produced it.  Exit code 0 means
success, 1 a validation or usage problem, 2 an internal failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

from . import data, gradcam, training
from .model import (ModelConfig, PopularityModel, build_multimodal,
                    checkpoint_load, checkpoint_save)
from .tensor import Tensor

MODALITIES = ("video", "text", "multimodal")

_DEFAULTS = {
    "modality": "video",
    "seed": 0,
    "learning_rate": 1e-3,
    "batch_size": 32,
    "max_epochs": 50,
    "patience": 5,
    "embed_dim": 256,
    "attention_hidden": 128,
    "lstm_hidden": 128,
    "fusion_hidden": 128,
    "dropout_frames": 0.0,
    "dropout_lstm": 0.0,
    "dropout_fusion": 0.0,
    "ratios": [0.8, 0.1, 0.1],
}

_PATH_FLAGS = ("manifest", "glove", "model", "out", "config",
               "video_ckpt", "text_ckpt")
_VALUE_FLAGS = ("split", "record", "normalize", "trials", "pgm")


class CliError(ValueError):
    """Bad usage or arguments; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse wants to exit(2) on bad flags; route through CliError so
    # dispatch can keep the documented exit-code contract
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _build_parser():
    parser = _Parser(prog="attnpop",
                     description="popularity prediction runs")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    def add(name, help_text, *flags, reports=False):
        p = sub.add_parser(name, help=help_text)
        if reports:
            p.add_argument("reports", nargs="+",
                           help="evaluation documents to tabulate")
        for flag in flags:
            if flag == "--modality":
                p.add_argument(flag, choices=MODALITIES)
            elif flag == "--seed":
                p.add_argument(flag, type=int)
            elif flag == "--split":
                p.add_argument(flag, choices=data.SPLITS, default="test")
            elif flag == "--normalize":
                p.add_argument(flag, choices=gradcam.NORMALIZE_MODES,
                               default="frame")
            elif flag == "--pgm":
                p.add_argument(flag, action="store_true")
            elif flag == "--trials":
                p.add_argument(flag, type=int)
            else:
                p.add_argument(flag)
        return p

    add("prepare", "validate a manifest and its feature files",
        "--manifest", "--glove", "--seed", "--config", "--out")
    add("train", "train a model and write its checkpoint",
        "--manifest", "--glove", "--modality", "--seed", "--config",
        "--out", "--video-ckpt", "--text-ckpt")
    add("evaluate", "report accuracy and rank correlation on a split",
        "--model", "--manifest", "--glove", "--split", "--seed",
        "--config", "--out")
    add("predict", "predict one record and print its attentions",
        "--model", "--manifest", "--glove", "--record", "--seed",
        "--config", "--out")
    add("visualize", "write heatmaps and the word-attention report",
        "--model", "--manifest", "--glove", "--record", "--out", "--pgm",
        "--normalize", "--seed", "--config")
    add("search", "random hyperparameter search",
        "--manifest", "--glove", "--modality", "--trials", "--seed",
        "--config", "--out")
    add("table", "render evaluation documents as a comparison table",
        "--out", reports=True)
    return parser


def resolve_run_config(args):
    """Merge defaults, ATTNPOP_SEED, the --config file, and flags."""
    run = dict(_DEFAULTS)
    env_seed = os.environ.get("ATTNPOP_SEED")
    if env_seed is not None:
        try:
            run["seed"] = int(env_seed)
        except ValueError:
            raise CliError(f"ATTNPOP_SEED must be an integer, "
                           f"got {env_seed!r}")
    run["search_space"] = None
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as handle:
            doc = json.load(handle)
        if not isinstance(doc, dict):
            raise CliError(f"{config_path}: config must be a key-value "
                           "document")
        unknown = [k for k in doc if k not in _DEFAULTS
                   and k != "search_space"]
        if unknown:
            raise CliError(f"{config_path}: unknown config keys: "
                           f"{', '.join(sorted(unknown))}")
        run.update(doc)
    for flag in ("modality", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            run[flag] = value
    for flag in _PATH_FLAGS + _VALUE_FLAGS:
        run[flag] = getattr(args, flag, None)
    return run


def _require(run, *flags):
    missing = [f"--{flag.replace('_', '-')}" for flag in flags
               if not run.get(flag)]
    if missing:
        raise CliError(f"missing required flags: {', '.join(missing)}")


def _emit(doc, out_path):
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def _load_labeled(run):
    records = data.load_manifest(run["manifest"])
    return data.build_dataset(records, ratios=tuple(run["ratios"]),
                              seed=run["seed"])


def _load_vocab(run):
    _require(run, "glove")
    return data.load_glove(run["glove"])


def _record_inputs(record, vocab, want_frames, want_words):
    frames = words = tokens = None
    if want_frames:
        frames = tuple(
            Tensor(row)
            for row in data.read_frame_features(
                record.frame_features_path).data)
    if want_words:
        words = tuple(data.headline_to_vectors(vocab, record.headline))
        tokens = data.tokenize(record.headline) or [""]
    return frames, words, tokens


def _examples(labeled, vocab, want_frames, want_words):
    buckets = {name: [] for name in data.SPLITS}
    for item in labeled:
        frames, words, _ = _record_inputs(item.record, vocab,
                                          want_frames, want_words)
        buckets[item.split].append(training.Example(
            label=item.label,
            normalized_viewcount=item.normalized_viewcount,
            frames=frames, words=words))
    return training.ExampleSet(train=tuple(buckets["train"]),
                               val=tuple(buckets["val"]),
                               test=tuple(buckets["test"]))


def _infer_feature_dim(labeled):
    path = labeled[0].record.frame_features_path
    return int(data.read_frame_features(path).shape[1])


def _model_config(run, modality, feature_dim=None, word_dim=None):
    return ModelConfig(
        modality=modality,
        feature_dim=feature_dim if feature_dim is not None else 2048,
        embed_dim=int(run["embed_dim"]),
        attention_hidden=int(run["attention_hidden"]),
        lstm_hidden=int(run["lstm_hidden"]),
        fusion_hidden=int(run["fusion_hidden"]),
        word_dim=word_dim if word_dim is not None else 100,
        dropout_frames=float(run["dropout_frames"]),
        dropout_lstm=float(run["dropout_lstm"]),
        dropout_fusion=float(run["dropout_fusion"]),
        seed=int(run["seed"]))


def _train_config(run):
    return training.TrainConfig(learning_rate=float(run["learning_rate"]),
                                batch_size=int(run["batch_size"]),
                                max_epochs=int(run["max_epochs"]),
                                patience=int(run["patience"]),
                                seed=int(run["seed"]))


def _cmd_prepare(args, run):
    _require(run, "manifest")
    records = data.load_manifest(run["manifest"])
    with_conv = 0
    shapes = set()
    for record in records:
        frames, conv = data.load_feature_store(record)
        shapes.add(frames.shape)
        if conv is not None:
            with_conv += 1
    labeled = data.build_dataset(records, ratios=tuple(run["ratios"]),
                                 seed=run["seed"])
    doc = {
        "config": run,
        "records": len(records),
        "with_conv_activations": with_conv,
        "popular": sum(item.label for item in labeled),
        "unpopular": sum(1 - item.label for item in labeled),
        "splits": {name: sum(item.split == name for item in labeled)
                   for name in data.SPLITS},
        "feature_shapes": sorted(list(s) for s in shapes),
    }
    if run["glove"]:
        vocab = data.load_glove(run["glove"])
        doc["vocabulary"] = {"words": len(vocab),
                             "word_dim": vocab.word_dim}
    _emit(doc, run["out"])


def _stage_multimodal(run):
    _require(run, "video_ckpt", "text_ckpt")
    video = checkpoint_load(run["video_ckpt"])
    text = checkpoint_load(run["text_ckpt"])
    config = _model_config(run, "multimodal",
                           feature_dim=video.config.feature_dim,
                           word_dim=text.config.word_dim)
    config = replace(config,
                     embed_dim=video.config.embed_dim,
                     attention_hidden=video.config.attention_hidden,
                     lstm_hidden=text.config.lstm_hidden)
    return build_multimodal(video, text, config)


def _cmd_train(args, run):
    _require(run, "manifest", "out")
    modality = run["modality"]
    labeled = _load_labeled(run)
    want_frames = modality in ("video", "multimodal")
    want_words = modality in ("text", "multimodal")
    vocab = _load_vocab(run) if want_words else None
    dataset = _examples(labeled, vocab, want_frames, want_words)
    if modality == "multimodal":
        model = _stage_multimodal(run)
    else:
        model = PopularityModel.create(_model_config(
            run, modality,
            feature_dim=_infer_feature_dim(labeled) if want_frames
            else None,
            word_dim=vocab.word_dim if vocab else None))
    result = training.train(model, dataset, _train_config(run))
    checkpoint_save(model, run["out"])
    _emit({"config": run,
           "checkpoint": run["out"],
           "history": list(result.history),
           "best_epoch": result.best_epoch,
           "best_val_accuracy": result.best_val_accuracy}, None)


def _cmd_evaluate(args, run):
    _require(run, "model", "manifest")
    model = checkpoint_load(run["model"])
    vocab = _load_vocab(run) if model.text is not None else None
    labeled = _load_labeled(run)
    dataset = _examples(labeled, vocab, model.video is not None,
                        model.text is not None)
    examples = getattr(dataset, run["split"])
    report = training.evaluate(model, examples)
    _emit({"config": run,
           "modality": model.modality,
           "variant": "attention",
           "split": run["split"],
           "report": asdict(report)}, run["out"])


def _find_record(labeled, record_id):
    for item in labeled:
        if item.record.id == record_id:
            return item
    raise CliError(f"record {record_id!r} is not in the manifest")


def _cmd_predict(args, run):
    _require(run, "model", "manifest", "record")
    model = checkpoint_load(run["model"])
    vocab = _load_vocab(run) if model.text is not None else None
    item = _find_record(_load_labeled(run), run["record"])
    frames, words, _ = _record_inputs(item.record, vocab,
                                      model.video is not None,
                                      model.text is not None)
    out = model.predict(frames=frames, words=words)
    _emit({"config": run,
           "id": item.record.id,
           "label": item.label,
           "normalized_viewcount": item.normalized_viewcount,
           "logit": out.logit,
           "probability": out.probability,
           "alpha": None if out.alpha is None else out.alpha.tolist(),
           "beta": None if out.beta is None else out.beta.tolist()},
          run["out"])


def _write_pgm(path, values):
    """Portable graymap, plain (P2) variant, 0-255 by round(255 * v)."""
    height, width = values.shape
    lines = ["P2", f"{width} {height}", "255"]
    for row in values:
        lines.append(" ".join(str(int(round(255.0 * v))) for v in row))
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + "\n")


def render_visualization(viz, report, out_dir, record_id, run_config,
                         pgm=False, normalize="frame"):
    """Write the visualization document plus optional graymaps.

    Returns the written paths; reruns overwrite byte-identically.
    """
    doc = {
        "config": run_config,
        "id": record_id,
        "normalize": normalize,
        "alpha": viz.alpha.tolist(),
        "frames": [{"scale": h.scale,
                    "intensities": h.displayed.tolist()}
                   for h in viz.heatmaps],
        "text_report": None if report is None else {
            "tokens": list(report.tokens),
            "beta": report.beta.tolist(),
            "relative": report.relative.tolist()},
    }
    paths = [os.path.join(out_dir, f"{record_id}.json")]
    with open(paths[0], "w", encoding="utf-8") as handle:
        handle.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    if pgm:
        for i, heatmap in enumerate(viz.heatmaps):
            path = os.path.join(out_dir, f"{record_id}_frame{i:02d}.pgm")
            _write_pgm(path, heatmap.displayed.data)
            paths.append(path)
    return paths


def _cmd_visualize(args, run):
    _require(run, "model", "manifest", "record", "out")
    model = checkpoint_load(run["model"])
    if model.video is None:
        raise CliError("visualize needs a model with a video branch")
    vocab = _load_vocab(run) if model.text is not None else None
    item = _find_record(_load_labeled(run), run["record"])
    if item.record.conv_activations_path is None:
        raise CliError(f"record {item.record.id!r} has no conv "
                       "activations to draw")
    frames_tensor, conv = data.load_feature_store(item.record)
    frames = tuple(Tensor(row) for row in frames_tensor.data)
    words = tokens = None
    if model.text is not None:
        _, words, tokens = _record_inputs(item.record, vocab, False, True)
    conv_frames = [Tensor(conv.data[i]) for i in range(conv.shape[0])]
    viz, report, _ = gradcam.visualize_sequence(
        model, frames, conv_frames, words=words, tokens=tokens,
        normalize=run["normalize"])
    os.makedirs(run["out"], exist_ok=True)
    paths = render_visualization(viz, report, run["out"], item.record.id,
                                 run, pgm=run["pgm"],
                                 normalize=run["normalize"])
    for path in paths:
        print(path, file=sys.stderr)


def _search_space(run):
    raw = run.get("search_space")
    if not raw:
        return training.SearchSpace()
    known = {f for f in training.SearchSpace.__dataclass_fields__}
    unknown = [k for k in raw if k not in known]
    if unknown:
        raise CliError(f"unknown search_space keys: "
                       f"{', '.join(sorted(unknown))}")
    return training.SearchSpace(**{k: tuple(v) for k, v in raw.items()})


def _cmd_search(args, run):
    _require(run, "manifest", "trials")
    modality = run["modality"]
    labeled = _load_labeled(run)
    want_frames = modality in ("video", "multimodal")
    want_words = modality in ("text", "multimodal")
    vocab = _load_vocab(run) if want_words else None
    dataset = _examples(labeled, vocab, want_frames, want_words)
    base = _model_config(
        run, modality,
        feature_dim=_infer_feature_dim(labeled) if want_frames else None,
        word_dim=vocab.word_dim if vocab else None)
    results = training.random_search(_search_space(run),
                                     int(run["trials"]), dataset, base,
                                     _train_config(run), seed=run["seed"])
    _emit({"config": run,
           "trials": [{"trial": r.trial,
                       "model_config": asdict(r.model_config),
                       "train_config": asdict(r.train_config),
                       "report": asdict(r.report)} for r in results]},
          run["out"])


_TABLE_ROWS = (("video", "mean"), ("video", "attention"),
               ("text", "mean"), ("text", "attention"),
               ("multimodal", "mean"), ("multimodal", "attention"))
_INPUT_LABELS = {"video": "Video frames", "text": "Headline",
                 "multimodal": "Multimodal"}
_BASELINE_LABELS = {"video": "ResNet50 mean", "text": "biLSTM",
                    "multimodal": "ResNet + biLSTM"}


def emit_table(entries):
    """Render evaluation reports in the fixed comparison-row order.

    Returns (text table, machine-readable twin document).
    """
    if not entries:
        raise ValueError("need at least one report")
    rows = []
    for entry in entries:
        modality = entry["modality"]
        variant = entry.get("variant", "attention")
        if (modality, variant) not in _TABLE_ROWS:
            raise ValueError(f"unknown table row: {modality}/{variant}")
        rows.append({
            "modality": modality,
            "variant": variant,
            "input": _INPUT_LABELS[modality],
            "features": "+ attention" if variant == "attention"
                        else _BASELINE_LABELS[modality],
            "accuracy": float(entry["accuracy"]),
            "spearman": float(entry["spearman"]),
        })
    rows.sort(key=lambda r: _TABLE_ROWS.index((r["modality"],
                                               r["variant"])))
    header = ("Input", "Features", "Acc [%]", "Spearman")
    cells = [(r["input"], r["features"],
              format(100.0 * r["accuracy"], ".2f"),
              format(r["spearman"], ".3f")) for r in rows]
    widths = [max(len(header[i]), *(len(c[i]) for c in cells))
              for i in range(4)]
    lines = [" | ".join(header[i].ljust(widths[i]) for i in range(4))]
    lines.append("-+-".join("-" * w for w in widths))
    for cell in cells:
        lines.append(" | ".join(
            cell[i].ljust(widths[i]) if i < 2 else cell[i].rjust(widths[i])
            for i in range(4)))
    return "\n".join(lines) + "\n", {"rows": rows}


def _cmd_table(args, run):
    entries = []
    for path in args.reports:
        with open(path, encoding="utf-8") as handle:
            doc = json.load(handle)
        entries.append({"modality": doc["modality"],
                        "variant": doc.get("variant", "attention"),
                        "accuracy": doc["report"]["accuracy"],
                        "spearman": doc["report"]["spearman"]})
    text, twin = emit_table(entries)
    twin_doc = {"config": run, **twin}
    if run["out"]:
        with open(run["out"], "w", encoding="utf-8") as handle:
            handle.write(text)
        _emit(twin_doc, run["out"] + ".json")
    else:
        sys.stdout.write(text)
        _emit(twin_doc, None)


_HANDLERS = {
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "visualize": _cmd_visualize,
    "search": _cmd_search,
    "table": _cmd_table,
}


def dispatch(argv=None):
    """Route argv to a subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return 1
        _HANDLERS[args.command](args, resolve_run_config(args))
        return 0
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the documented catch-all
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
