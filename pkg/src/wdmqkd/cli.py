"""Command-line entry point.

``wdmqkd run`` simulates a network session and writes per-link time series,
block and estimate logs, the key ledger and ``summary.json``.
``wdmqkd calibrate`` fits a link parameter to an end-of-session QBER.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .channel import ChannelState, expected_qber_with_drift
from .core import ConfigError, LinkConfig, load_config
from .finite_key import ESTIMATE_LOG_COLUMNS
from .network import SessionReport, audit_ledger, run_network_session
from .rates import expected_tally_rates
from .sifting import BLOCK_LOG_COLUMNS

log = logging.getLogger("wdmqkd")

TIMESERIES_COLUMNS = ["wall_time", "link", "qber_K", "qber_C", "skl", "skr"]
CALIBRATION_MAX_ITER = 30


class CalibrationError(RuntimeError):
    pass


# -- artifacts -----------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(round(x, 12))
    return str(x)


def summarize(report: SessionReport, seed: int) -> dict:
    links = {}
    for label, lr in report.links.items():
        links[label] = {
            "total_secret_bits": lr.total_secret_bits,
            "mean_qber_K": lr.mean_qber_K,
            "mean_qber_C": lr.mean_qber_C,
            "mean_skr_bps": report.mean_skr(label),
            "blocks_ok": lr.blocks_ok,
            "blocks_failed": lr.blocks_failed,
            "status": lr.status,
            "clicks": lr.clicks,
            "auth_refill_bits": lr.auth_refill_bits,
            "delivered_bits": report.delivered_bits(label),
        }
    return {
        "duration": report.duration,
        "time_compress": report.time_compress,
        "seed": seed,
        "links": links,
        "ledger_problems": audit_ledger(report.ledger),
    }


def write_artifacts(report: SessionReport, out: Path, seed: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for label, lr in report.links.items():
        with open(out / f"timeseries_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMESERIES_COLUMNS)
            for b in sorted(lr.blocks, key=lambda b: b.wall_time):
                w.writerow([_fmt(b.wall_time), label, _fmt(b.qber_K), _fmt(b.qber_C), b.skl, _fmt(b.skr)])
        with open(out / f"blocks_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BLOCK_LOG_COLUMNS + ["status"])
            for b in lr.blocks:
                n, m = b.tallies
                w.writerow([b.block_id, b.start_round, b.end_round,
                            *n[0], *m[0], *n[1], *m[1], b.status])
        with open(out / f"estimates_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ESTIMATE_LOG_COLUMNS)
            for b in lr.blocks:
                if b.estimate is not None:
                    w.writerow([_fmt(x) for x in b.estimate.log_row(b.block_id)])
        with open(out / f"chunks_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_start", "t_end", "theta", "n_K", "m_K", "n_C", "m_C", "realigned"])
            for c in lr.chunks:
                w.writerow([_fmt(c.t_start), _fmt(c.t_end), _fmt(c.theta), c.n_K, c.m_K, c.n_C, c.m_C, int(c.realigned)])
    with open(out / "key_ledger.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link", "offset", "length", "purpose"])
        for e in report.ledger:
            w.writerow([e.link, e.offset, e.length, e.purpose])
    summary = summarize(report, seed)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# -- calibration ---------------------------------------------------------------

def expected_final_qber(cfg: LinkConfig, drift_sigma: float, elapsed: float, basis: int = 0) -> float:
    """Ensemble-mean QBER after ``elapsed`` seconds of free drift, dark counts included."""
    ch = ChannelState.initial(cfg)
    base = ch.residual_misalignment
    off = ch.basis_offset_k if basis == 0 else ch.basis_offset_c
    e = expected_qber_with_drift(base + off, drift_sigma, elapsed)
    n, m, *_ = expected_tally_rates(cfg, e, e)
    return float(m[basis].sum() / n[basis].sum())


def calibrate_drift(
    cfg: LinkConfig,
    target: float,
    elapsed: float,
    bounds: tuple[float, float] = (0.0, 0.05),
    rel_tol: float = 0.1,
    max_iter: int = CALIBRATION_MAX_ITER,
) -> float:
    """Bisect ``drift_sigma`` until the final key-basis QBER is within ``rel_tol`` of ``target``."""
    if not 0.0 < target < 0.5:
        # 50% is the fully depolarized limit, approached but never reached by a finite drift
        raise CalibrationError(f"target QBER {target} outside (0, 0.5)")
    lo, hi = bounds
    f_lo, f_hi = expected_final_qber(cfg, lo, elapsed), expected_final_qber(cfg, hi, elapsed)
    if abs(f_lo - target) <= rel_tol * target:
        return lo
    if not f_lo <= target <= f_hi:
        raise CalibrationError(
            f"target QBER {target} outside reachable range [{f_lo:.4f}, {f_hi:.4f}] for drift_sigma in {bounds}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = expected_final_qber(cfg, mid, elapsed)
        if abs(f - target) <= 1e-4 * target:
            return mid
        lo, hi = (mid, hi) if f < target else (lo, mid)
    mid = 0.5 * (lo + hi)
    if abs(expected_final_qber(cfg, mid, elapsed) - target) <= rel_tol * target:
        return mid
    raise CalibrationError(f"no convergence after {max_iter} iterations")


# -- commands ------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    block = None
    if args.scale_block and args.time_compress > 1:
        block = max(1, int(cfg.protocol.block_size_sifted / args.time_compress))
        log.warning("block size scaled to %d sifted bits; finite-key penalties will dominate", block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "session.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("wdmqkd").addHandler(handler)
    try:
        report = run_network_session(
            cfg, args.duration, seed=args.seed, time_compress=args.time_compress,
            block_size=block, concurrent=args.concurrent,
        )
        summary = write_artifacts(report, out, args.seed)
    finally:
        logging.getLogger("wdmqkd").removeHandler(handler)
        handler.close()
    for label, s in summary["links"].items():
        print(f"{label}: {s['total_secret_bits']} bits, mean SKR {s['mean_skr_bps']:.0f} bps, "
              f"blocks ok/failed {s['blocks_ok']}/{s['blocks_failed']}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    if args.param != "drift_sigma":
        raise CalibrationError(f"unsupported parameter {args.param!r}")
    labels = [args.link] if args.link else list(cfg.labels)
    elapsed = max(0.0, args.duration - cfg.alignment_time)
    fitted = {}
    for label in labels:
        sigma = calibrate_drift(cfg.link(label), args.target_qber_final, elapsed, (args.lower, args.upper))
        fitted[label] = {"drift_sigma": sigma}
    fragment = {"links": fitted}
    text = json.dumps(fragment, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wdmqkd", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a network session")
    r.add_argument("config")
    r.add_argument("--duration", type=float, default=21600.0, help="represented session length, s")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="out")
    r.add_argument("--time-compress", type=float, default=1.0)
    r.add_argument("--scale-block", action="store_true", help="shrink sifted blocks by the compression factor")
    r.add_argument("--concurrent", action="store_true", help="run links in parallel threads")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="fit a parameter to a final QBER")
    c.add_argument("config")
    c.add_argument("--target-qber-final", type=float, required=True)
    c.add_argument("--param", default="drift_sigma")
    c.add_argument("--link")
    c.add_argument("--duration", type=float, default=21600.0)
    c.add_argument("--lower", type=float, default=0.0)
    c.add_argument("--upper", type=float, default=0.05)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
