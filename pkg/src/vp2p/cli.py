"""``vp2p`` command line: synth, register, bench, gradcheck."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from pathlib import Path

from . import gradcheck
from .errors import InsufficientDataError, NoConsensusError, ParseError, VP2PError
from .io import cloud_to_bytes, correspondences_to_csv, dump_json, features_to_bytes
from .pipeline import (
    TRIAL_COLUMNS,
    RunConfig,
    aggregate,
    format_table,
    load_config_file,
    merge_config,
    register_files,
    register_synthetic,
    run_bench,
    timing_summary,
)
from .synth import generate_scene, make_correspondences, synthesize_features

EXIT_OK = 0
EXIT_FAILED_ROWS = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_NO_CONSENSUS = 4
EXIT_INSUFFICIENT = 5
EXIT_ALGORITHM = 6
EXIT_GRADCHECK = 7
EXIT_IO = 9


def _atomic_write(path: Path, data: bytes | str) -> None:
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_outputs(out: Path, files: dict[str, bytes | str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        _atomic_write(out / name, data)


def cmd_synth(config: RunConfig) -> int:
    scene = generate_scene(config.scene)
    corrs = make_correspondences(scene, config.scene)
    feats, _, _ = synthesize_features(scene, config.scene, corrs=corrs)
    files = {
        "cloud.bin": cloud_to_bytes(scene.cloud),
        "pose_gt.json": dump_json(scene.pose_gt.to_list()),
        "correspondences.csv": correspondences_to_csv(corrs),
        "features.bin": features_to_bytes(feats.f2d, feats.f3d),
    }
    out = Path(config.out)
    _write_outputs(out, files)
    for name, data in files.items():
        print(f"{out / name}\t{len(data)} bytes")
    return EXIT_OK


def cmd_register(config: RunConfig) -> int:
    res = register_files(config, config.input) if config.input else register_synthetic(config)
    out = Path(config.out)
    _write_outputs(out, {"result.json": dump_json(res.to_dict()), "timing.json": dump_json(res.timing)})
    d = res.to_dict()
    if d["rte"] is None:
        print(f"inliers {res.inlier_count}/{res.n_correspondences} cost {res.cost:.6g}")
    else:
        print(f"RTE {d['rte']:.6g} m  RRE {d['rre']:.6g} deg  inliers {res.inlier_count}/{res.n_correspondences}")
    return EXIT_OK


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in TRIAL_COLUMNS])
    return buf.getvalue()


def cmd_bench(config: RunConfig) -> int:
    rows = run_bench(config)
    agg = aggregate(rows, config.drop_failures)
    report = dict(agg, drop_failures=config.drop_failures, seed=config.seed, errors=[[r["rte"], r["rre"]] for r in rows])
    timing = timing_summary(rows)
    _write_outputs(
        Path(config.out),
        {"report.json": dump_json(report), "trials.csv": _rows_csv(rows), "timing.json": dump_json(timing)},
    )
    print(format_table(agg))
    print("stage seconds: " + ", ".join(f"{k} {v:.3f}" for k, v in timing.items()))
    for r in rows:
        if r["status"] != "ok":
            print(f"trial {r['trial']} (seed {r['seed']}) failed: {r['error']}")
    return EXIT_OK if agg["failed"] == 0 else EXIT_FAILED_ROWS


def cmd_gradcheck(config: RunConfig, corrupt: str | None = None) -> int:
    results = gradcheck.run_checks(config.seed, corrupt=corrupt)
    for r in results:
        print(r.line())
    report = {r.name: {"max_rel_dev": r.max_rel_dev, "tolerance": r.tolerance, "runs": r.runs, "passed": r.passed} for r in results}
    _write_outputs(Path(config.out), {"gradcheck.json": dump_json(report)})
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted keys, e.g. {\"scene.n_points\": 2048}")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--pixel-noise", type=float, dest="scene.pixel_noise_sigma")
    common.add_argument("--outliers", type=float, dest="scene.outlier_fraction")
    common.add_argument("--feature-noise", type=float, dest="scene.feature_noise_sigma")
    common.add_argument("--n-points", type=int, dest="scene.n_points")
    common.add_argument("--no-misregister", action="store_const", const=False, dest="scene.misregister")

    parser = argparse.ArgumentParser(prog="vp2p", description="Image-to-point-cloud registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic scene to --out")
    reg = sub.add_parser("register", parents=[common], help="register a synthetic scene or --input directory")
    reg.add_argument("--input", help="directory written by 'vp2p synth'")
    bench = sub.add_parser("bench", parents=[common], help="seeded registration benchmark")
    bench.add_argument("--trials", type=int, dest="bench.trials")
    bench.add_argument("--drop-failures", action="store_const", const=True, dest="bench.drop_failures")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--corrupt", choices=gradcheck.CHECKS, help=argparse.SUPPRESS)
    return parser


def _flat_overrides(args: argparse.Namespace) -> dict:
    flat = {}
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "set", "corrupt"):
            continue
        flat[key] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        flat[key.strip()] = value.strip()
    return flat


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_layer = load_config_file(args.config) if args.config else {}
        config = RunConfig.from_flat(merge_config(file_layer, _flat_overrides(args)))
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "register":
            return cmd_register(config)
        if args.command == "bench":
            return cmd_bench(config)
        return cmd_gradcheck(config, args.corrupt)
    except ParseError as exc:
        print(f"error: parse failure: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NoConsensusError as exc:
        print(f"error: no consensus: {exc}", file=sys.stderr)
        return EXIT_NO_CONSENSUS
    except InsufficientDataError as exc:
        print(f"error: insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except VP2PError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
