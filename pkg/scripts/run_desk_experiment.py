"""End-to-end desk experiment through the command-line tool.

corpus -> simulate -> train-codebooks -> encode/decode per variant -> eval,
then one summary table comparing the variants against reference replication.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from spatialcodec.cli import main as cli
from spatialcodec.codec import replicate_reference
from spatialcodec.corpus import make_corpus
from spatialcodec.metrics import read_report_csv
from spatialcodec.roomsim import read_manifest, resolve
from spatialcodec.signal import read_audio, write_audio

VARIANTS = {
    "lossless": ["--set", "ref_mode=passthrough", "--set", "spatial_mode=bypass"],
    "spatial-rvq": ["--set", "ref_mode=passthrough"],
    "full": [],
}


def run(argv):
    code = cli(argv)
    if code != 0:
        sys.exit(f"command failed with exit code {code}: spatialcodec {' '.join(argv)}")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("work_dir")
    p.add_argument("-n", type=int, default=20, help="number of simulated utterances")
    p.add_argument("--train", type=int, default=14, help="utterances used for codebook training")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="extra configuration override passed to every command")
    args = p.parse_args()

    work = Path(args.work_dir)
    common = ["--seed", str(args.seed)] + [a for kv in args.overrides for a in ("--set", kv)]
    make_corpus(work / "corpus", args.n, seed=args.seed, duration=(2.5, 3.5))
    run(["simulate", "--corpus", str(work / "corpus"), "--out", str(work / "data"), "-n", str(args.n), *common])
    manifest = work / "data" / "manifest.tsv"
    books = work / "codebooks.sccb"
    run(["train-codebooks", "--manifest", str(manifest), "--out", str(books), "--limit", str(args.train), *common])

    reports = {}
    for name, flags in VARIANTS.items():
        enc, dec = work / name / "enc", work / name / "dec"
        run(["encode", "--manifest", str(manifest), "--out-dir", str(enc), "--codebooks", str(books), *common, *flags])
        run(["decode", "--manifest", str(manifest), "--in-dir", str(enc), "--out-dir", str(dec),
             "--codebooks", str(books), *common, *flags])
        run(["eval", "--manifest", str(manifest), "--decoded", str(dec), "--out", str(work / name / "report.csv"),
             *common])
        reports[name] = read_report_csv(work / name / "report.csv")

    repl = work / "replication" / "dec"
    repl.mkdir(parents=True, exist_ok=True)
    for r in read_manifest(manifest):
        write_audio(repl / f"{r.utt_id}.wav", replicate_reference(read_audio(resolve(manifest, r.mixture))),
                    subtype="FLOAT")
    run(["eval", "--manifest", str(manifest), "--decoded", str(repl), "--out", str(work / "replication/report.csv"),
         *common])
    reports["replication"] = read_report_csv(work / "replication/report.csv")

    held_out = {r.utt_id for r in read_manifest(manifest)[args.train:]}
    cols = ("spatial_similarity", "rtf_error", "doa_error", "snr", "beamformed_snr")
    print(f"\nheld-out utterances: {len(held_out)}")
    print(f"{'variant':<14}" + "".join(f"{c:>17}" for c in cols))
    for name, rows in reports.items():
        rows = [r for r in rows if r["id"] in held_out]
        if rows:
            print(f"{name:<14}" + "".join(f"{np.mean([float(r[c]) for r in rows]):>17.4f}" for c in cols))


if __name__ == "__main__":
    main()
