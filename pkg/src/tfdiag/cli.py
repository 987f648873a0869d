"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure. Every command writes ``manifest.json`` into its output
directory (``--out``, else ``$TFDIAG_OUT/<command>``, else ``runs/<command>``).

Files written
  synth        train.csv, test.csv (L values + label per row), impulses.csv
               (split,row,label,onset_s), dataset.json
  train        checkpoint.ckpt, report.json, curves.csv (epoch,loss,train_acc,test_acc)
  eval         eval.json, confusion.csv (true_label, then one count column per predicted class)
  reconstruct  reconstruct_time.csv (channel,index,original,reconstructed,conv),
               reconstruct_spectrum.csv (channel,bin,frequency_hz,original,reconstructed),
               spectrum_input.csv / spectrum_reconstructed.csv (channel,bin,frequency_hz,re,im,magnitude),
               filter.csv (channel,bin,frequency_hz,re,im,magnitude of the embedding filter)
  attention    attention.csv (sample,position,weight)
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import kvconfig
from .data import PRESETS, FaultSpec, SignalDataset, load_csv, make_dataset, minmax_normalize, save_csv
from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError
from .model import (FEMCFormer, ModelConfig, dump_attention, load_checkpoint, read_checkpoint,
                    save_checkpoint)
from .spectral import ComplexSpectrum, num_bins, real_dft, write_spectrum_csv
from .tensor import Tensor
from .train import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("TFDIAG_OUT", "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, started: str, artifacts: list[Path], extra: dict | None = None):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "output_dir": str(out),
        "started": started,
        "finished": _now(),
        "artifacts": [str(p) for p in artifacts],
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _apply_config_file(args, parser) -> None:
    """Values from ``--config`` fill in flags the user did not pass explicitly."""
    if not getattr(args, "config", None):
        return
    values = kvconfig.load(args.config)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, val in values.items():
        if key not in defaults:
            raise ConfigError(f"{args.config}: unknown key {key!r}")
        if getattr(args, key) == defaults[key]:
            setattr(args, key, val)


# --- dataset helpers ----------------------------------------------------------

def _load_specs(path) -> dict[str, FaultSpec]:
    """``<class>.<field> = value`` lines; class order follows first appearance."""
    raw = kvconfig.load(path)
    specs: dict[str, dict] = {}
    for key, val in raw.items():
        if "." not in key:
            raise ConfigError(f"{path}: expected '<class>.<field>', got {key!r}")
        name, fld = key.split(".", 1)
        specs.setdefault(name, {})[fld] = val
    out = {}
    for name, fields in specs.items():
        fields.setdefault("kind", name)
        out[name] = kvconfig.build(FaultSpec, fields)
    return out


def _read_meta(data_dir: Path) -> dict:
    p = data_dir / "dataset.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _load_split(data_dir: Path, split: str, num_classes: int | None = None) -> SignalDataset:
    meta = _read_meta(data_dir)
    path = data_dir / f"{split}.csv"
    if not path.exists():
        raise ConfigError(f"missing dataset file {path}")
    length = meta.get("length") or _row_length(path)
    names = meta.get("class_names")
    ncls = num_classes or (len(names) if names else None)
    ds = load_csv(path, length, True, ncls, names, meta.get("sample_rate_hz", 12000.0))
    ds.snr_db = meta.get("snr_db")
    return ds


def _row_length(path: Path) -> int:
    with open(path) as fh:
        for line in fh:
            toks = line.strip().split(",")
            try:
                float(toks[0])
            except ValueError:
                continue
            return len(toks) - 1
    raise ParseError(f"{path}: no data rows")


def _pick_sample(args, length: int) -> tuple[np.ndarray, float, np.ndarray | None]:
    """(signal, sample rate, impulse onsets or None) from --data/--split or --csv."""
    if args.csv:
        ds = load_csv(args.csv, length, not args.no_labels)
        sr, onsets = args.sample_rate or ds.sample_rate_hz, None
    else:
        data_dir = Path(args.data)
        ds = _load_split(data_dir, args.split)
        sr = _read_meta(data_dir).get("sample_rate_hz", 12000.0)
        onsets = _impulses_for(data_dir, args.split, args.index)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"sample index {args.index} out of range for {len(ds)} samples")
    if ds.length != length:
        raise DimensionError(f"sample length {ds.length} does not match model input_length {length}")
    return ds.samples[args.index], sr, onsets


def _impulses_for(data_dir: Path, split: str, row: int) -> np.ndarray | None:
    p = data_dir / "impulses.csv"
    if not p.exists():
        return None
    vals = []
    with open(p) as fh:
        next(fh)
        for line in fh:
            s, r, _, t = line.strip().split(",")
            if s == split and int(r) == row:
                vals.append(float(t))
    return np.array(vals)


def _model_from_args(args) -> FEMCFormer:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    overrides = {}
    if args.model_config:
        overrides.update(kvconfig.load(args.model_config))
    return FEMCFormer(ModelConfig.from_dict(overrides))


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    specs = _load_specs(args.specs) if args.specs else PRESETS.get(args.preset)
    if specs is None:
        raise ConfigError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
    train_set, test_set = make_dataset(specs, args.per_class, args.length, args.sample_rate, args.snr,
                                       args.split_ratio, args.seed)
    out = _out_dir(args)
    paths = [out / "train.csv", out / "test.csv", out / "impulses.csv", out / "dataset.json"]
    save_csv(train_set, paths[0])
    save_csv(test_set, paths[1])
    with open(paths[2], "w") as fh:
        fh.write("split,row,label,onset_s\n")
        for split, ds in (("train", train_set), ("test", test_set)):
            for row, (lab, onsets) in enumerate(zip(ds.labels, ds.impulses)):
                for t in onsets:
                    fh.write(f"{split},{row},{lab},{float(t)!r}\n")
    snrs = [d.measured_snr_db for d in (train_set, test_set) if d.measured_snr_db is not None]
    measured = float(np.mean(np.concatenate(snrs))) if snrs else None
    meta = {
        "class_names": train_set.class_names, "sample_rate_hz": args.sample_rate, "length": args.length,
        "snr_db": args.snr, "measured_snr_db": measured, "seed": args.seed,
        "train_counts": train_set.class_counts().tolist(), "test_counts": test_set.class_counts().tolist(),
        "specs": {k: dataclasses.asdict(v) for k, v in specs.items()},
    }
    paths[3].write_text(json.dumps(meta, indent=2))
    print(f"train: {len(train_set)} samples {dict(zip(train_set.class_names, meta['train_counts']))}")
    print(f"test:  {len(test_set)} samples {dict(zip(test_set.class_names, meta['test_counts']))}")
    if measured is None:
        print("no noise injected (clean signals)")
    else:
        print(f"requested SNR {args.snr:.2f} dB, measured {measured:.3f} dB")
    _write_manifest(out, args, started, paths)
    return EXIT_OK


MODEL_FLAGS = ("embed_channels", "num_blocks", "gamma", "ablation", "softmax_axis", "classifier_hidden",
               "model_seed")


def cmd_train(args) -> int:
    started = _now()
    data_dir = Path(args.data)
    meta = _read_meta(data_dir)
    train_set = _load_split(data_dir, "train")
    test_path = data_dir / "test.csv"
    test_set = _load_split(data_dir, "test", train_set.num_classes) if test_path.exists() else None
    mvals = kvconfig.load(args.model_config) if args.model_config else {}
    for flag in MODEL_FLAGS:
        val = getattr(args, flag)
        if val is not None:
            mvals["seed" if flag == "model_seed" else flag] = val
    mvals["input_length"] = train_set.length
    mvals["num_classes"] = len(meta.get("class_names") or train_set.class_names)
    mcfg = ModelConfig.from_dict(mvals)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       checkpoint_every=args.checkpoint_every, recalibrate_bn=not args.no_bn_recalibration)
    model = FEMCFormer(mcfg)
    out = _out_dir(args)
    ckpt = out / "checkpoint.ckpt"
    report_path, curves_path = out / "report.json", out / "curves.csv"

    def on_epoch_end(epoch, m, rep):
        if epoch % tcfg.checkpoint_every == 0 or epoch == tcfg.epochs:
            save_checkpoint(ckpt, m, {"epoch": epoch})

    log = None if args.quiet else print
    try:
        report = train(model, train_set, test_set, tcfg, on_epoch_end, log)
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        exc.report.write_curves(curves_path)
        report_path.write_text(exc.report.to_json(timing=False))
        kept = [p for p in (ckpt, report_path, curves_path) if p.exists()]
        _write_manifest(out, args, started, kept, {"status": "diverged", "error": str(exc)})
        return EXIT_NUMERIC
    report_path.write_text(report.to_json(timing=False))
    report.write_curves(curves_path)
    print(f"final test accuracy {report.final_test_accuracy:.2f}%  J1 {report.j1:.4f}  J2 {report.j2:.4f}")
    _write_manifest(out, args, started, [ckpt, report_path, curves_path],
                    {"status": "ok", "wall_clock_s": report.wall_clock_s})
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    header, _ = read_checkpoint(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    if args.csv:
        ds = load_csv(args.csv, _row_length(Path(args.csv)), True)
    else:
        ds = _load_split(Path(args.data), args.split)
    if ds.length != cfg.input_length:
        raise DimensionError(f"input_length mismatch: data has {ds.length}, checkpoint expects {cfg.input_length}")
    if ds.num_classes > cfg.num_classes:
        raise DimensionError(f"num_classes mismatch: data has {ds.num_classes}, checkpoint has {cfg.num_classes}")
    if ds.num_classes < cfg.num_classes:
        ds.class_names = list(ds.class_names) + [f"class_{k}" for k in range(ds.num_classes, cfg.num_classes)]
    res = evaluate(model, ds)
    out = _out_dir(args)
    eval_path, cm_path = out / "eval.json", out / "confusion.csv"
    eval_path.write_text(json.dumps(res.to_dict(), indent=2))
    with open(cm_path, "w") as fh:
        fh.write("true_label," + ",".join(f"pred_{k}" for k in range(cfg.num_classes)) + "\n")
        for k, row in enumerate(res.confusion):
            fh.write(f"{k}," + ",".join(str(int(v)) for v in row) + "\n")
    print(f"accuracy {res.accuracy:.4f}%")
    print(f"J1 {res.j1:.6g}  J2 {res.j2:.6g}  J2-J1 {res.j2 - res.j1:.12g}  (Sw+Sb)/Sb {res.j2_alt:.6g}"
          + ("  [J1 capped]" if res.capped else ""))
    print("confusion (rows: true, cols: predicted)")
    for row in res.confusion:
        print("  " + " ".join(f"{int(v):5d}" for v in row))
    _write_manifest(out, args, started, [eval_path, cm_path])
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    started = _now()
    model = _model_from_args(args)
    cfg = model.config
    if model.embed.filter is None:
        raise ConfigError("this model has no embedding filter (non_farel variant)")
    signal, sr, _ = _pick_sample(args, cfg.input_length)
    trace: dict = {}
    model.eval()
    model.forward(Tensor(signal[None, None, :]), trace)
    conv = trace["embed.conv"][0]
    rec = trace["embedding"][0]
    orig = np.broadcast_to(signal, conv.shape)
    if not args.raw:
        orig, rec, conv = minmax_normalize(orig), minmax_normalize(rec), minmax_normalize(conv)
    out = _out_dir(args)
    paths = [out / n for n in ("reconstruct_time.csv", "reconstruct_spectrum.csv", "spectrum_input.csv",
                               "spectrum_reconstructed.csv", "filter.csv")]
    rows = [(str(c), orig[c], rec[c], conv[c]) for c in range(conv.shape[0])]
    rows.append(("mean", orig.mean(axis=0), rec.mean(axis=0), conv.mean(axis=0)))
    with open(paths[0], "w") as fh:
        fh.write("channel,index,original,reconstructed,conv\n")
        for ch, o, r, c in rows:
            for i in range(len(o)):
                fh.write(f"{ch},{i},{float(o[i])!r},{float(r[i])!r},{float(c[i])!r}\n")
    spec_o = np.abs(real_dft(np.asarray(orig)))
    spec_r = np.abs(real_dft(np.asarray(rec)))
    if not args.raw:
        spec_o, spec_r = minmax_normalize(spec_o), minmax_normalize(spec_r)
    freqs = np.arange(num_bins(cfg.input_length)) * sr / cfg.input_length
    with open(paths[1], "w") as fh:
        fh.write("channel,bin,frequency_hz,original,reconstructed\n")
        for c in range(spec_o.shape[0]):
            for k in range(spec_o.shape[1]):
                fh.write(f"{c},{k},{float(freqs[k])!r},{float(spec_o[c, k])!r},{float(spec_r[c, k])!r}\n")
        mo = minmax_normalize(spec_o.mean(axis=0)) if not args.raw else spec_o.mean(axis=0)
        mr = minmax_normalize(spec_r.mean(axis=0)) if not args.raw else spec_r.mean(axis=0)
        for k in range(len(mo)):
            fh.write(f"mean,{k},{float(freqs[k])!r},{float(mo[k])!r},{float(mr[k])!r}\n")
    write_spectrum_csv(paths[2], real_dft(np.asarray(trace["embed.conv"][0])), sr, cfg.input_length)
    write_spectrum_csv(paths[3], real_dft(np.asarray(trace["embedding"][0])), sr, cfg.input_length)
    w = model.embed.filter
    write_spectrum_csv(paths[4], ComplexSpectrum(w.re, w.im, cfg.input_length), sr)
    print(f"wrote {len(paths)} files to {out}")
    _write_manifest(out, args, started, paths)
    return EXIT_OK


def cmd_attention(args) -> int:
    started = _now()
    model = _model_from_args(args)
    cfg = model.config
    block = cfg.num_blocks if args.block is None else args.block
    signal, _, _ = _pick_sample(args, cfg.input_length)
    raw, avg = dump_attention(model, signal[None, :], block - 1, args.layer - 1)
    out = _out_dir(args)
    path = out / "attention.csv"
    with open(path, "w") as fh:
        fh.write("sample,position,weight\n")
        for i, w in enumerate(avg[0]):
            fh.write(f"{args.index},{i},{float(w)!r}\n")
    sums = raw.sum(axis=-1) if cfg.softmax_axis == "time" else raw.sum(axis=1)
    print(f"block {block} MSCAL {args.layer}: {avg.shape[1]} positions; "
          f"max |row sum - 1| = {np.abs(sums - 1).max():.2e}")
    _write_manifest(out, args, started, [path])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    started = _now()
    results = run_suite(args.seed)
    print(f"{'component':20s} {'max rel err':>12s}  status")
    for r in results:
        print(f"{r.name:20s} {r.max_rel_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    if args.out:
        out = _out_dir(args)
        path = out / "gradcheck.json"
        path.write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2))
        _write_manifest(out, args, started, [path])
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfdiag", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--config", help="key = value file; explicit flags take precedence")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="generate a synthetic fault dataset")
    common(s)
    s.add_argument("--preset", default="four-class")
    s.add_argument("--specs", help="fault spec file with '<class>.<field> = value' lines")
    s.add_argument("--snr", type=float, default=None, help="SNR in dB; omit for clean signals")
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--length", type=int, default=2048)
    s.add_argument("--sample-rate", type=float, default=12000.0)
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a synthesized or CSV dataset directory")
    common(t)
    t.add_argument("--data", required=True, help="directory with train.csv / test.csv")
    t.add_argument("--model-config", help="key = value ModelConfig file")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.add_argument("--embed-channels", type=int)
    t.add_argument("--num-blocks", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--ablation", choices=["none", "non-msa", "non-fft", "non-farel",
                                          "non_msa", "non_fft", "non_farel"])
    t.add_argument("--softmax-axis", choices=["time", "channel"])
    t.add_argument("--classifier-hidden", type=int)
    t.add_argument("--model-seed", type=int)
    t.add_argument("--no-bn-recalibration", action="store_true",
                   help="evaluate with the exponential running batchnorm statistics as-is")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint: accuracy, J1/J2, confusion matrix")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", default="test")
    e.add_argument("--csv", help="labelled CSV file instead of --data")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("reconstruct", cmd_reconstruct, "dump embedding reconstruction"),
                                 ("attention", cmd_attention, "dump an MSCAL attention map")):
        r = sub.add_parser(name, help=helptext)
        common(r)
        src = r.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint")
        src.add_argument("--fresh", action="store_true", help="use an untrained model")
        r.add_argument("--model-config", help="ModelConfig file for --fresh")
        r.add_argument("--data")
        r.add_argument("--split", default="test")
        r.add_argument("--csv")
        r.add_argument("--no-labels", action="store_true")
        r.add_argument("--sample-rate", type=float)
        r.add_argument("--index", type=int, default=0)
        if name == "reconstruct":
            r.add_argument("--raw", action="store_true", help="skip min-max normalization")
        else:
            r.add_argument("--block", type=int, help="1-based block (default: last)")
            r.add_argument("--layer", type=int, default=1, help="1-based MSCAL layer within the block")
        r.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every component")
    common(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _apply_config_file(args, sub)
        if args.command in ("reconstruct", "attention") and not (args.data or args.csv):
            raise ConfigError("one of --data or --csv is required")
        return args.func(args)
    except (ConfigError, DimensionError, ParseError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
