"""Command-line interface.

Every subcommand takes ``--config`` (YAML mapping), ``--seed``, ``--out`` and
``--workers``. A value given as a flag wins over the config file, which wins
over the built-in default. Failures print one JSON line to stderr and exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .archive import FORMAT_VERSION, load_features, save_features
from .checkpoint import VERSION as CKPT_VERSION
from .errors import SpeakerLookupError, ValidationError

log = logging.getLogger("cotatron")

# per-subcommand defaults; keys double as config-file keys
DEFAULTS: dict[str, dict] = {
    "common": {"seed": 0, "out": "out", "workers": 1},
    "prepare-data": {"root": None, "layout": "flat-tsv", "name": "corpus", "max_seconds": 10.0,
                     "min_minutes": 5.0, "fractions": [0.8, 0.1, 0.1]},
    "train-cotatron": {"train": None, "stage2": None, "val": None, "lexicon": None,
                       "model_size": "full", "max_steps": None, "phase2_steps": None},
    "train-vc": {"train": None, "val": None, "cotatron": None, "model_size": "full", "max_steps": None},
    "extract": {"manifest": None, "cotatron": None, "vc": None, "name": "features"},
    "convert": {"audio": None, "transcript": None, "target": None, "source_speaker": None,
                "cotatron": None, "vc": None, "vocoder_iters": None},
    "evaluate": {"reference": None, "reference_test": None, "converted": None, "manifest": None,
                 "features": None, "kind": "L", "threshold": 0.7, "epochs": 20, "system": None},
    "plot-alignment": {"audio": None, "transcript": None, "cotatron": None, "name": "alignment"},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of option values (flags override it)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", type=Path, help="output directory (default ./out)")
    p.add_argument("--workers", type=int, help="worker threads for data loading (default 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cotatron", description="Transcription-guided voice conversion toolkit")
    ap.add_argument("--version", action="version",
                    version=f"cotatron {__version__} (checkpoint format {CKPT_VERSION}, "
                            f"COTA-MEL/COTA-FEA format {FORMAT_VERSION})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build manifest, filter and split by transcription")
    _common(p)
    p.add_argument("--root", type=Path)
    p.add_argument("--layout", choices=("vctk-like", "libritts-like", "flat-tsv"))
    p.add_argument("--name")
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--min-minutes", type=float, help="0 disables the per-speaker filter")
    p.add_argument("--fractions", type=lambda s: [float(x) for x in s.split(",")], help="e.g. 0.8,0.1,0.1")

    p = sub.add_parser("train-cotatron", help="train the transcription-guided TTS encoder")
    _common(p)
    p.add_argument("--train", type=Path, help="stage-1 manifest TSV")
    p.add_argument("--stage2", type=Path, help="manifest added for the transfer phase")
    p.add_argument("--val", type=Path)
    p.add_argument("--lexicon", type=Path, help="CMU-style pronouncing dictionary")
    p.add_argument("--model-size", choices=("full", "toy"))
    p.add_argument("--max-steps", type=int, help="steps per phase (default: until val plateau)")
    p.add_argument("--phase2-steps", type=int)

    p = sub.add_parser("train-vc", help="train residual encoder + VC decoder on a frozen encoder")
    _common(p)
    p.add_argument("--train", type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--cotatron", type=Path, help="encoder checkpoint")
    p.add_argument("--model-size", choices=("full", "toy"))
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("extract", help="write L/R features of a manifest to a COTA-FEA archive")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--cotatron", type=Path)
    p.add_argument("--vc", type=Path)
    p.add_argument("--name")

    p = sub.add_parser("convert", help="convert one utterance to a target speaker")
    _common(p)
    p.add_argument("--audio", type=Path)
    p.add_argument("--transcript")
    p.add_argument("--target")
    p.add_argument("--source-speaker")
    p.add_argument("--cotatron", type=Path)
    p.add_argument("--vc", type=Path)
    p.add_argument("--vocoder-iters", type=int, help="also write a Griffin-Lim WAV")

    p = sub.add_parser("evaluate", help="objective metrics")
    p.add_argument("metric", choices=("sca", "vde", "probe"))
    _common(p)
    p.add_argument("--reference", type=Path, help="sca: manifest of genuine recordings (classifier train)")
    p.add_argument("--reference-test", type=Path, help="sca: held-out genuine recordings")
    p.add_argument("--converted", type=Path, help="sca/vde: directory written by `convert`")
    p.add_argument("--manifest", type=Path, help="probe: manifest giving speakers and audio")
    p.add_argument("--features", type=Path, help="probe: COTA-FEA archive from `extract`")
    p.add_argument("--kind", choices=("L", "LR", "M"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--system", help="row label in the Markdown table")

    p = sub.add_parser("plot-alignment", help="render an alignment heatmap PNG")
    _common(p)
    p.add_argument("--audio", type=Path)
    p.add_argument("--transcript")
    p.add_argument("--cotatron", type=Path)
    p.add_argument("--name")
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags."""
    opts = dict(DEFAULTS["common"])
    opts.update(DEFAULTS[args.command])
    extra: dict = {}
    if args.config is not None:
        data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{args.config}: config must be a mapping")
        for k, v in data.items():
            key = k.replace("-", "_")
            (opts if key in opts else extra)[key] = v
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose") or v is None:
            continue
        opts[k] = v
    opts["_extra"] = extra
    return opts


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out(opts: dict) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(phase: str, opts: dict):
    from .training import TrainConfig
    names = {f.name for f in fields(TrainConfig)}
    cfg_keys = {k: v for k, v in opts["_extra"].items() if k in names}
    unknown = set(opts["_extra"]) - names - {"model"}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg_keys["seed"] = opts["seed"]
    if opts.get("max_steps") is not None:
        cfg_keys["max_steps"] = opts["max_steps"]
    return TrainConfig.for_phase(phase, **cfg_keys)


def _model_config(base, opts: dict):
    """Apply the config file's ``model:`` mapping on top of a preset architecture."""
    overrides = opts["_extra"].get("model") or {}
    if not isinstance(overrides, dict):
        raise ValidationError("config key 'model' must be a mapping")
    names = {f.name for f in fields(base)}
    unknown = set(overrides) - names
    if unknown:
        raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
    return type(base).from_dict({**base.to_dict(), **overrides})


# --- subcommands ---------------------------------------------------------------------

def cmd_prepare_data(opts: dict) -> dict:
    from .corpus import build_manifest, filter_duration, filter_speaker_minutes, split_by_transcription, write_manifest, write_splits
    _need(opts, "root")
    out = _out(opts)
    m = build_manifest(opts["root"], opts["layout"], workers=opts["workers"])
    n_found = len(m)
    m = filter_duration(m, opts["max_seconds"])
    if opts["min_minutes"] and opts["min_minutes"] > 0:
        m = filter_speaker_minutes(m, opts["min_minutes"])
    write_manifest(out / f"{opts['name']}.unsplit.tsv", m)
    train, val, test = split_by_transcription(m, opts["fractions"], opts["seed"])
    paths = write_splits(out, opts["name"], {"train": train, "val": val, "test": test})
    return {"found": n_found, "skipped": m.skipped, "kept": len(m),
            "splits": {k: str(v) for k, v in paths.items()},
            "counts": {"train": len(train), "val": len(val), "test": len(test)}}


def _examples(path, speakers, workers):
    from .corpus import read_manifest
    from .data import load_examples
    return load_examples(read_manifest(path), speakers, workers)


def _known_examples(path, speakers, workers):
    # validation only scores speakers the model was trained on
    from .corpus import Manifest, read_manifest
    from .data import load_examples
    m = read_manifest(path)
    return load_examples(Manifest(tuple(u for u in m if u.speaker_id in speakers), m.split_tag), speakers, workers)


def cmd_train_cotatron(opts: dict) -> dict:
    from .corpus import read_manifest, speaker_index
    from .text import load_lexicon
    from .training import train_cotatron
    from .tts import CotatronConfig
    _need(opts, "train")
    out = _out(opts)
    manifests = [read_manifest(opts["train"])] + ([read_manifest(opts["stage2"])] if opts["stage2"] else [])
    spk = speaker_index(manifests)
    cfg = _train_config("cotatron", opts)
    stage1 = _examples(opts["train"], spk, opts["workers"])
    stage2 = _examples(opts["stage2"], spk, opts["workers"]) if opts["stage2"] else None
    val = _known_examples(opts["val"], spk, opts["workers"]) if opts["val"] else []
    lexicon = load_lexicon(opts["lexicon"]) if opts["lexicon"] else None
    model_cfg = _model_config(CotatronConfig.toy() if opts["model_size"] == "toy" else CotatronConfig(), opts)
    _, path, history = train_cotatron(stage1, stage2, cfg, model_cfg, sorted(spk, key=spk.get), out,
                                      val_examples=val, lexicon=lexicon, phase2_steps=opts["phase2_steps"])
    return {"checkpoint": str(path), "steps": len(history),
            "final_loss": history[-1]["total"] if history else None}


def cmd_train_vc(opts: dict) -> dict:
    from .corpus import read_manifest, speaker_index
    from .training import load_cotatron, train_vc
    from .vc_decoder import VCDecoderConfig
    _need(opts, "train", "cotatron")
    out = _out(opts)
    spk = speaker_index([read_manifest(opts["train"])])
    cotatron, _ = load_cotatron(opts["cotatron"])
    cfg = _train_config("vc", opts)
    train = _examples(opts["train"], spk, opts["workers"])
    val = _known_examples(opts["val"], spk, opts["workers"]) if opts["val"] else []
    dec = _model_config(VCDecoderConfig.toy() if opts["model_size"] == "toy" else VCDecoderConfig(), opts)
    _, path, history, _ = train_vc(train, cotatron, cfg, sorted(spk, key=spk.get), decoder_cfg=dec,
                                   out_dir=out, val_examples=val)
    return {"checkpoint": str(path), "steps": len(history),
            "final_loss": history[-1]["total"] if history else None}


def cmd_extract(opts: dict) -> dict:
    from .audio import load_audio, mel_spectrogram
    from .corpus import read_manifest
    from .features import extract_features
    from .text import SymbolTable, tokenize
    from .training import load_cotatron, load_vc
    _need(opts, "manifest", "cotatron", "vc")
    out = _out(opts)
    cotatron, payload = load_cotatron(opts["cotatron"])
    system, _ = load_vc(opts["vc"])
    table = SymbolTable.from_json(payload["symbols"])
    entries = {}
    for u in read_manifest(opts["manifest"]):
        mel = mel_spectrogram(load_audio(u.audio_path)).frames
        lf, r, _ = extract_features(cotatron, system.residual, mel, tokenize(u.transcript, table))
        entries[u.audio_path] = (lf, r)
    path = out / f"{opts['name']}.fea"
    save_features(path, entries)
    return {"archive": str(path), "entries": len(entries)}


def cmd_convert(opts: dict) -> dict:
    from .conversion import Converter
    _need(opts, "audio", "transcript", "target", "cotatron", "vc")
    out = _out(opts)
    conv = Converter.from_checkpoints(opts["cotatron"], opts["vc"])
    res = conv.convert(opts["audio"], opts["transcript"], str(opts["target"]), out_dir=out,
                       source_speaker=opts["source_speaker"], vocoder_iters=opts["vocoder_iters"])
    return res.metadata


def _converted_items(directory: Path) -> list[dict]:
    items = []
    for meta in sorted(Path(directory).glob("*.json")):
        d = json.loads(meta.read_text(encoding="utf-8"))
        if "mel" in d and "target_speaker" in d:
            d["_dir"] = meta.parent
            items.append(d)
    if not items:
        raise ValidationError(f"no conversion outputs found in {directory}")
    return items


def cmd_evaluate(opts: dict) -> dict:
    from . import evaluation as ev
    out = _out(opts)
    metric = opts["metric"]
    cfg = {k: v for k, v in opts.items() if not k.startswith("_") and k not in ("out", "workers")}
    if metric == "sca":
        from .archive import load_mel
        from .corpus import read_manifest
        from .data import load_examples
        _need(opts, "reference", "converted")
        ref = read_manifest(opts["reference"])
        spk = {s: i for i, s in enumerate(ref.speakers)}
        exs = load_examples(ref, spk, opts["workers"])
        kw = {}
        if opts["reference_test"]:
            test = read_manifest(opts["reference_test"])
            kw = {"test_mels": [e.mel for e in load_examples(test, {s: 0 for s in test.speakers}, opts["workers"])],
                  "test_labels": [u.speaker_id for u in test]}
        clf = ev.train_sca_classifier([e.mel for e in exs], [u.speaker_id for u in ref], **kw)
        items = _converted_items(opts["converted"])
        mels = [load_mel(d["_dir"] / d["mel"]) for d in items]
        report = ev.sca(clf, mels, [d["target_speaker"] for d in items], cfg)
        report.extra.update(train_accuracy=clf.train_accuracy, test_accuracy=clf.test_accuracy)
    elif metric == "vde":
        from .audio import load_audio
        _need(opts, "converted")
        items = [d for d in _converted_items(opts["converted"]) if "wav" in d]
        if not items:
            raise ValidationError("vde needs converted WAVs; run convert with --vocoder-iters")
        errs, frames = [], 0
        for d in items:
            r = ev.vde(load_audio(d["source_audio"]), load_audio(d["_dir"] / d["wav"]), opts["threshold"])
            errs.append(r.value * r.n_samples)
            frames += r.n_samples
        report = ev.MetricReport("vde", sum(errs) / frames, frames, ev.config_digest(cfg),
                                 {"utterances": len(items)})
    else:
        from .audio import load_audio, mel_spectrogram
        from .corpus import read_manifest, split_by_transcription
        _need(opts, "manifest")
        kind = opts["kind"]
        m = read_manifest(opts["manifest"])
        feats = load_features(opts["features"]) if kind != "M" else None
        if kind != "M" and feats is None:
            raise ValidationError("probe on L or LR needs --features")

        def feature(u):
            if kind == "M":
                return mel_spectrogram(load_audio(u.audio_path)).frames
            if u.audio_path not in feats:
                raise ValidationError(f"no features for {u.audio_path} in {opts['features']}")
            lf, r = feats[u.audio_path]
            return lf if kind == "L" else np.concatenate([lf, r], axis=1)

        splits = split_by_transcription(m, (0.8, 0.1, 0.1), opts["seed"])
        data = [ev.ProbeData([feature(u) for u in s], [u.speaker_id for u in s]) for s in splits]
        report = ev.disentanglement_probe(kind, *data, epochs=opts["epochs"], seed=opts["seed"], config=cfg)
    report.extra["system"] = opts["system"] or report.extra.get("system", metric)
    ev.write_reports([report], out / "reports.jsonl")
    table = ev.markdown_table(ev.read_reports(out / "reports.jsonl"))
    (out / "reports.md").write_text(table, encoding="utf-8")
    return report.to_dict()


def plot_alignment(alignment: np.ndarray, symbols: list[str], path, title: str | None = None) -> Path:
    """Heatmap with text symbols on the y axis and decoder frames on the x axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_frames, n_sym = alignment.shape
    fig, ax = plt.subplots(figsize=(max(4.0, n_frames / 12), max(3.0, n_sym / 5)))
    ax.imshow(alignment.T, origin="lower", aspect="auto", interpolation="none", cmap="viridis")
    ax.set_yticks(range(n_sym))
    ax.set_yticklabels([s if s != " " else "␣" for s in symbols], fontsize=6)
    ax.set_xlabel("decoder step (mel frame)")
    ax.set_ylabel("text symbol")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_plot_alignment(opts: dict) -> dict:
    from .audio import load_audio, mel_spectrogram
    from .features import extract_alignment
    from .text import SymbolTable, tokenize
    from .training import load_cotatron
    _need(opts, "audio", "transcript", "cotatron")
    out = _out(opts)
    model, payload = load_cotatron(opts["cotatron"])
    table = SymbolTable.from_json(payload["symbols"])
    seq = tokenize(opts["transcript"], table)
    a = extract_alignment(model, mel_spectrogram(load_audio(opts["audio"])).frames, seq)
    path = plot_alignment(a, seq.decode(table), out / f"{opts['name']}.png", title=Path(opts["audio"]).name)
    np.save(out / f"{opts['name']}.npy", a)
    return {"png": str(path), "frames": int(a.shape[0]), "symbols": int(a.shape[1])}


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-cotatron": cmd_train_cotatron,
    "train-vc": cmd_train_vc,
    "extract": cmd_extract,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
    "plot-alignment": cmd_plot_alignment,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        result = COMMANDS[args.command](opts)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        msg = str(exc)
        if isinstance(exc, KeyError) and not isinstance(exc, SpeakerLookupError) and exc.args:
            msg = str(exc.args[0])
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
