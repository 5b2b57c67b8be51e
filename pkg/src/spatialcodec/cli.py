"""Command-line entry point: simulate, train-codebooks, encode, decode, eval."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, metrics
from .config import ConfigError, RunConfig, load_config
from .roomsim import generate_dataset, list_corpus, default_array, read_manifest, resolve
from .signal import AudioBuffer, read_audio, write_audio

log = logging.getLogger("spatialcodec")


class CommandError(Exception):
    """Operator error reported as a one-line message with exit status 2."""


def _manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"manifest not found: {path}")
    records = read_manifest(path)
    if not records:
        raise CommandError(f"manifest {path} lists no utterances")
    return records


def _codebooks(cfg: RunConfig, path) -> codec.CodebookSet | None:
    c = cfg.codec_config()
    if not codec._required_codebooks(c):
        return None
    if path is None:
        raise CommandError(f"--codebooks is required for {c.ref_mode}/{c.spatial_mode} mode")
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"codebook file not found: {path}")
    return codec.CodebookSet.load(path)


def _finish(failures: list, total: int) -> int:
    if failures:
        print(f"{len(failures)} of {total} items failed: {' '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def rate_from_bytes(data: bytes, bs: codec.Bitstream) -> float:
    """Payload bits per second counted from the serialized bytes (header excluded)."""
    seconds = bs.num_frames * bs.config.hop_size / bs.config.sample_rate
    return 8 * (len(data) - len(bs.header_bytes())) / seconds


def cmd_simulate(cfg: RunConfig, args) -> int:
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise CommandError(f"corpus directory not found: {corpus}")
    if not list_corpus(corpus):
        raise CommandError(f"no .wav files in corpus directory {corpus}")
    out = Path(args.out)
    records = generate_dataset(corpus, args.n, cfg.roomsim_config(), cfg.seed, out, cfg.workers)
    cfg.echo(out)
    rt60 = np.array([r.rt60 for r in records])
    doa = np.array([r.doa for r in records])
    hist, edges = np.histogram(doa, bins=6, range=(0, 180))
    print(f"wrote {len(records)} utterances to {out / 'manifest.tsv'}")
    print(f"RT60 mean {rt60.mean():.3f} s (min {rt60.min():.3f}, max {rt60.max():.3f})")
    print("DoA histogram: " + "  ".join(f"{int(a)}-{int(b)}: {n}" for a, b, n in zip(edges, edges[1:], hist)))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    records = _manifest(args.manifest)
    if args.limit:
        records = records[: args.limit]
    signals = [read_audio(resolve(args.manifest, r.mixture), cfg.sample_rate) for r in records]
    cb = codec.train_codebooks(signals, cfg.codec_config(), cfg.seed, cfg.max_iters, cfg.tol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cb.save(out)
    cfg.echo(out.parent)
    print(f"trained {cb.bands} bands x {cb.rvq_stages} stages x {cb.codebook_size} entries per branch "
          f"on {len(signals)} utterances; fingerprint {cb.fingerprint.hex()}")
    return 0


def _items(args, in_suffix: str, out_suffix: str) -> list[tuple[str, Path, Path]]:
    """(id, input, output) triples from positional paths or a manifest."""
    if args.manifest:
        if not args.out_dir:
            raise CommandError("--out-dir is required with --manifest")
        out_dir = Path(args.out_dir)
        items = []
        for r in _manifest(args.manifest):
            src = resolve(args.manifest, r.mixture) if args.in_dir is None else Path(args.in_dir) / f"{r.utt_id}{in_suffix}"
            items.append((r.utt_id, src, out_dir / f"{r.utt_id}{out_suffix}"))
        return items
    if not (args.input and args.output):
        raise CommandError("give INPUT OUTPUT or --manifest with --out-dir")
    return [(Path(args.input).stem, Path(args.input), Path(args.output))]


def cmd_encode(cfg: RunConfig, args) -> int:
    config = cfg.codec_config()
    cb = _codebooks(cfg, args.codebooks)
    items = _items(args, ".wav", ".scbs")
    failures, rates = [], []
    for utt, src, dst in items:
        try:
            bs = codec.encode(read_audio(src, config.sample_rate), config, cb)
            data = bs.to_bytes()
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(data)
            rate = rate_from_bytes(data, bs)
            rates.append(rate)
            split = bs.payload_rate()
            print(f"{utt}: {rate / 1000:.3f} kbps (reference {split['reference'] / 1000:.3f} + "
                  f"spatial {split['spatial'] / 1000:.3f})")
        except Exception as exc:  # noqa: BLE001 - reported per item
            log.error("%s: %s", utt, exc)
            failures.append(utt)
    if len(items) > 1 and rates:
        print(f"mean payload rate {np.mean(rates) / 1000:.3f} kbps over {len(rates)} items")
    if items:
        cfg.echo(items[0][2].parent)
    return _finish(failures, len(items))


def cmd_decode(cfg: RunConfig, args) -> int:
    if args.manifest and args.in_dir is None:
        raise CommandError("--in-dir with the .scbs files is required with --manifest")
    items = _items(args, ".scbs", ".wav")
    cb = None
    cb_path = Path(args.codebooks) if args.codebooks else None
    if cb_path is not None:
        if not cb_path.is_file():
            raise CommandError(f"codebook file not found: {cb_path}")
        cb = codec.CodebookSet.load(cb_path)
    failures = []
    for utt, src, dst in items:
        try:
            bs = codec.Bitstream.from_bytes(Path(src).read_bytes())
            x = codec.decode(bs, cb)
            dst.parent.mkdir(parents=True, exist_ok=True)
            write_audio(dst, x, "FLOAT")
        except Exception as exc:  # noqa: BLE001 - reported per item
            log.error("%s: %s", utt, exc)
            failures.append(utt)
    if items:
        cfg.echo(items[0][2].parent)
    return _finish(failures, len(items))


def cmd_eval(cfg: RunConfig, args) -> int:
    records = _manifest(args.manifest)
    decoded = Path(args.decoded)
    if not decoded.is_dir():
        raise CommandError(f"decoded directory not found: {decoded}")
    array = default_array(spacings=cfg.spacings)
    bank = metrics.design_beam_bank(array, cfg.beams, cfg.diagonal_loading, sample_rate=cfg.sample_rate)
    reports, features, failures = [], [], []
    for r in records:
        try:
            x = read_audio(resolve(args.manifest, r.mixture), cfg.sample_rate)
            x_hat = read_audio(decoded / f"{r.utt_id}.wav", cfg.sample_rate)
            n = min(x.num_samples, x_hat.num_samples)
            rep = metrics.evaluate_pair(r.utt_id, x, x_hat, array, bank, r.doa, cfg.ref_index,
                                        grid_step=cfg.music_grid_step)
            reports.append(rep)
            if args.features:
                for label, sig in (("original", x), ("decoded", x_hat)):
                    sig = AudioBuffer(sig.samples[:, :n], sig.sample_rate)
                    feat = metrics.spatial_feature(sig, bank)
                    features += metrics.feature_rows(r.utt_id, label, feat, bank, cfg.feature_freqs)
        except Exception as exc:  # noqa: BLE001 - reported per item
            log.error("%s: %s", r.utt_id, exc)
            failures.append(r.utt_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(out, reports)
    if args.features:
        with open(args.features, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(metrics.FEATURE_COLUMNS)
            w.writerows(features)
    cfg.echo(out.parent)
    if reports:
        m = metrics.summarize(reports)
        print(f"{len(reports)} utterances: SS {m.spatial_similarity:.4f}  RTF err {m.rtf_error:.4f} rad  "
              f"DoA err {m.doa_error:.2f} deg  SNR {m.snr:.2f} dB  beamformed SNR {m.beamformed_snr:.2f} dB")
    return _finish(failures, len(records))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialcodec", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render reverberant array mixtures")
    s.add_argument("--corpus", required=True, help="directory of mono speech WAV files")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("-n", "--num", dest="n", type=int, required=True, help="number of utterances")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train-codebooks", parents=[common], help="train reference and spatial codebooks")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="codebook bundle to write")
    t.add_argument("--limit", type=int, default=0, help="use only the first N utterances")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("encode", cmd_encode, "WAV to SCBS bitstream"),
                                 ("decode", cmd_decode, "SCBS bitstream to WAV")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("input", nargs="?")
        e.add_argument("output", nargs="?")
        e.add_argument("--codebooks")
        e.add_argument("--manifest", help="batch mode over a manifest")
        e.add_argument("--in-dir", help="batch input directory (default for encode: manifest mixtures)")
        e.add_argument("--out-dir")
        e.set_defaults(func=func)

    v = sub.add_parser("eval", parents=[common], help="metric report for decoded utterances")
    v.add_argument("--manifest", required=True)
    v.add_argument("--decoded", required=True, help="directory with <utt_id>.wav reconstructions")
    v.add_argument("--out", required=True, help="CSV report path")
    v.add_argument("--features", help="also write beamspace features at feature_freqs to this CSV")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except (CommandError, ConfigError, codec.CodebookMismatch, codec.BitstreamError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
