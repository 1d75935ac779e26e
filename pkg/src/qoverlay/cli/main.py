"""Batch scenario runner.

Exit codes: 0 when the scenario completed per its contract (a lossy transfer
that loses data still counts), 1 on a configuration error, 2 on a delivery or
protocol failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import struct
import sys
from dataclasses import replace
from typing import Any, TextIO

import numpy as np

from ..apps import (
    SharedRandom,
    parallel_las_vegas_search,
    parallel_monte_carlo,
    probe_sets,
    split,
    to_fraction,
)
from ..apps.montecarlo import estimand
from ..control import Controller, PathSpec
from ..errors import (
    CircuitUnavailable,
    ConfigError,
    DeliveryFailed,
    DesyncError,
    InvalidInput,
    KeyExhausted,
    NotFound,
    PartialAggregate,
    PathUnavailable,
    SessionTimeout,
)
from ..overlay import BYTESTREAM, LOSSY, RELIABLE, SYNC, CipherMode, CircuitConfig, CircuitKind
from ..quantum import Eavesdropper
from .config import TopologyConfig, build_controller, default_topology, derive_seed, load_topology

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2

KIND_ALIASES = {
    "lossy": LOSSY,
    "reliable": RELIABLE,
    "bytestream": BYTESTREAM,
    "sync": SYNC,
}
for _kind in CircuitKind:
    KIND_ALIASES[_kind.value] = _kind

_PROTOCOL_ERRORS = (DeliveryFailed, PathUnavailable, CircuitUnavailable, KeyExhausted,
                    SessionTimeout, DesyncError)
_INDEX = struct.Struct("<I")


class Reporter:
    """Plain-text output plus an optional JSON-lines record stream."""

    def __init__(self, out: TextIO, records: TextIO | None):
        self.out = out
        self.records = records

    def line(self, text: str = "") -> None:
        print(text, file=self.out)

    def table(self, header: list[str], rows: list[list[Any]]) -> None:
        cells = [header] + [[_cell(v) for v in row] for row in rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
        for r in cells:
            self.line("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip())

    def record(self, **fields: Any) -> None:
        if self.records is not None:
            self.records.write(json.dumps(fields, sort_keys=True) + "\n")


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# ---------------------------------------------------------------- plumbing
def _topology(args) -> TopologyConfig:
    return load_topology(args.topology) if args.topology else default_topology()


def _controller(args, cfg: TopologyConfig, drop: float | None = None) -> Controller:
    ctl = build_controller(cfg, args.seed, parallel=args.parallel_nodes, drop=drop)
    ctl.runtime.max_wait_ticks = args.ticks
    return ctl


def _route(cfg: TopologyConfig, args) -> PathSpec:
    """The path named by --path, the link named by --link, or the first link."""
    if getattr(args, "path", None):
        entry = cfg.find_path(args.path)
        if entry is None:
            raise ConfigError(f"unknown path {args.path!r}")
        return PathSpec(entry.nodes, entry.name)
    if getattr(args, "link", None):
        a, sep, b = args.link.partition("-")
        if not sep or cfg.find_link(a, b) is None:
            raise ConfigError(f"unknown link {args.link!r}")
        return PathSpec((a, b))
    if not cfg.links:
        raise ConfigError("the topology has no links")
    return PathSpec((cfg.links[0].a, cfg.links[0].b))


def _shared_random(ctl: Controller, route: PathSpec, k_bits: int, rep: Reporter) -> SharedRandom:
    """Draw the shared number at both ends of a synchronized_random path."""
    pid = ctl.establish_path(PathSpec(route.nodes, "shared-rng"), CircuitConfig(SYNC))
    head, tail = ctl.path(pid).handles()
    a, b = head.sync_random(k_bits), tail.sync_random(k_bits)
    if a != b:
        raise DesyncError("endpoints drew different shared numbers")
    rep.line(f"shared random ({k_bits} bits): {a:#x}")
    return SharedRandom(a, k_bits)


# ---------------------------------------------------------------- commands
def cmd_qkd(args, rep: Reporter) -> int:
    cfg = _topology(args)
    losses = args.loss if args.loss else [None]
    for loss in losses:
        run_cfg = cfg
        if loss is not None or args.eavesdropper is not None:
            run_cfg = replace(cfg, links=[_override(link, loss, args.eavesdropper) for link in cfg.links])
        ctl = _controller(args, run_cfg)
        link_id = _route(run_cfg, args).nodes
        link_id = f"{link_id[0]}-{link_id[1]}"
        rows, outs = [], []
        for trial in range(args.trials):
            out = ctl.run_qkd(link_id, pulse_count=args.pulses)
            outs.append(out)
            rows.append([trial, out.status.value, out.qber_estimate, out.sifted_bits,
                         out.distilled_bits, out.key_rate])
            rep.record(cmd="qkd", link=link_id, loss=loss, trial=trial, status=out.status.value,
                       qber=out.qber_estimate, sifted_bits=out.sifted_bits,
                       distilled_bits=out.distilled_bits, key_rate=out.key_rate)
        title = f"link {link_id}" + (f", loss {loss:g}" if loss is not None else "")
        rep.line(f"== qkd {title} ==")
        rep.table(["trial", "status", "qber", "sifted", "distilled", "key_rate"], rows)
        aborted = sum(not o.ok for o in outs)
        mean_qber = float(np.mean([o.qber_estimate for o in outs]))
        mean_bits = float(np.mean([o.distilled_bits for o in outs]))
        rep.line(f"aggregate: trials={len(outs)} aborted={aborted} mean_qber={mean_qber:.6g} "
                 f"mean_distilled_bits={mean_bits:.6g}")
        rep.record(cmd="qkd", link=link_id, loss=loss, aggregate=True, trials=len(outs),
                   aborted=aborted, mean_qber=mean_qber, mean_distilled_bits=mean_bits)
        _finish(args, ctl)
    return EXIT_OK


def _override(link, loss, eavesdropper):
    if loss is not None:
        link = replace(link, loss=loss)
    if eavesdropper is not None:
        link = replace(link, eavesdropper=Eavesdropper(eavesdropper))
    return link


def _payload(args) -> bytes:
    if args.input:
        try:
            with open(args.input, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read input {args.input}: {exc.strerror}") from None
    return np.random.default_rng(derive_seed(args.seed, 0xF11E)).bytes(args.size)


def cmd_circuit(args, rep: Reporter) -> int:
    kind = KIND_ALIASES[args.kind]
    if kind is SYNC:
        raise ConfigError("synchronized_random circuits carry no payload; use the syncrand command")
    cfg = _topology(args)
    data = _payload(args)
    config = CircuitConfig(kind, cipher_mode=CipherMode(args.cipher_mode),
                           max_datagram_bytes=args.max_datagram)
    ctl = _controller(args, cfg, drop=args.drop)
    route = _route(cfg, args)
    try:
        pid = ctl.establish_path(PathSpec(route.nodes, "transfer"), config)
        path = ctl.path(pid)
        head, tail = path.handles()
        if kind is BYTESTREAM:
            head.stream_write(data)
            head.stream_close()
            head.drain()
            received = tail.stream_read()
        else:
            received = _datagram_transfer(ctl, head, tail, data, config, kind, args.settle)
    finally:
        _finish(args, ctl)
    stats = [end.snapshot() for end in path.ends]
    sent = stats[0].sent
    delivered = stats[-1].surfaced
    lost = max(0, sent - delivered)
    retrans = sum(s.retransmitted for s in stats)
    sent_hash = hashlib.sha256(data).hexdigest()
    recv_hash = hashlib.sha256(received).hexdigest()
    match = sent_hash == recv_hash
    rep.line(f"== circuit {kind.value} over {' -> '.join(route.nodes)} ==")
    rep.table(["bytes_sent", "bytes_received", "datagrams", "delivered", "lost", "retransmitted"],
              [[len(data), len(received), sent, delivered, lost, retrans]])
    rep.line(f"sent sha256:     {sent_hash}")
    rep.line(f"received sha256: {recv_hash}")
    if match:
        rep.line("hash match")
    elif kind is LOSSY:
        rep.line("hash mismatch (expected: lossy datagrams may be dropped)")
    else:
        rep.line("hash mismatch")
    for node in path.relays:
        rep.line(f"relay {node} logged {len(path.relay_log(node))} plaintext records")
    rep.record(cmd="circuit", kind=kind.value, nodes=list(route.nodes), bytes_sent=len(data),
               bytes_received=len(received), datagrams=sent, delivered=delivered, lost=lost,
               retransmitted=retrans, hash_match=match)
    if not match and kind is not LOSSY:
        return EXIT_FAILURE
    return EXIT_OK


def _datagram_transfer(ctl, head, tail, data: bytes, config: CircuitConfig, kind: CircuitKind,
                       settle: int) -> bytes:
    """Send ``data`` as index-prefixed chunks and reassemble whatever arrives."""
    size = config.max_datagram_bytes - _INDEX.size
    chunks = [data[i:i + size] for i in range(0, len(data), size)] or [b""]
    for i, chunk in enumerate(chunks):
        msg = _INDEX.pack(i) + chunk
        if kind is LOSSY:
            head.send_lossy(msg)
        else:
            head.send_reliable(msg, wait=False)
    if kind is LOSSY:
        ctl.run_ticks(settle)
    else:
        head.drain()
    got: dict[int, bytes] = {}
    for msg in tail.recv_all():
        (i,) = _INDEX.unpack_from(msg)
        got[i] = msg[_INDEX.size:]
    return b"".join(got[i] for i in sorted(got))


def cmd_syncrand(args, rep: Reporter) -> int:
    cfg = _topology(args)
    ctl = _controller(args, cfg)
    route = _route(cfg, args)
    try:
        pid = ctl.establish_path(PathSpec(route.nodes, "syncrand"),
                                 CircuitConfig(SYNC, echo_period=args.echo_period))
        head, tail = ctl.path(pid).handles()
        a = [head.sync_random(args.bits) for _ in range(args.draws)]
        b = [tail.sync_random(args.bits) for _ in range(args.draws)]
    finally:
        _finish(args, ctl)
    same = a == b
    rep.line(f"== syncrand {args.draws} draws of {args.bits} bits over {' -> '.join(route.nodes)} ==")
    rep.table(["draw", route.nodes[0], route.nodes[-1]], [[i, x, y] for i, (x, y) in enumerate(zip(a, b))])
    rep.line(f"sequences identical: {str(same).lower()}")
    rep.record(cmd="syncrand", draws=args.draws, bits=args.bits, head=a, tail=b, identical=same)
    return EXIT_OK if same else EXIT_FAILURE


def cmd_montecarlo(args, rep: Reporter) -> int:
    entry = estimand(args.estimand)
    dim = 1 if args.strategy == "circular" else args.dim
    cfg = _topology(args)
    ctl = _controller(args, cfg)
    try:
        shared = _shared_random(ctl, _route(cfg, args), args.k_bits, rep)
    finally:
        _finish(args, ctl)
    r = to_fraction(shared)
    part = split(args.strategy, r, args.parts, dim=dim, resolution=args.resolution)
    seeds = [derive_seed(args.seed, 0x3C, i) for i in range(args.parts)]
    per_node = max(1, args.samples // args.parts)
    try:
        est = parallel_monte_carlo(entry.fn, part, per_node, seeds, workers=args.parts,
                                   failed_nodes=args.fail_node)
    except PartialAggregate as exc:
        rep.line(f"missing regions: {exc.missing}")
        est = exc.partial
        code = EXIT_FAILURE
    else:
        code = EXIT_OK
    exact = entry.exact(dim)
    rep.line(f"== montecarlo {entry.name}, {args.strategy} split, p={args.parts}, r={r:.6g} ==")
    rep.table(["region", "measure", "samples", "mean", "stderr"],
              [[g.index, g.measure, g.samples, g.mean, g.stderr] for g in est.regions])
    rep.line(f"estimate: {est.value:.6g} +/- {est.stderr:.6g} (exact {exact:.6g})")
    if entry.name == "quarter_circle" and dim == 2:
        z = abs(4 * est.value - math.pi) / (4 * est.stderr) if est.stderr else float("inf")
        rep.line(f"4 x estimate: {4 * est.value:.6g} +/- {4 * est.stderr:.6g}, "
                 f"{z:.3g} standard errors from pi")
    for g in est.regions:
        rep.record(cmd="montecarlo", region=g.index, measure=g.measure, samples=g.samples,
                   mean=g.mean, stderr=g.stderr)
    rep.record(cmd="montecarlo", aggregate=True, estimand=entry.name, estimate=est.value,
               stderr=est.stderr, exact=exact, r=r)
    return code


def cmd_search(args, rep: Reporter) -> int:
    cfg = _topology(args)
    ctl = _controller(args, cfg)
    try:
        shared = _shared_random(ctl, _route(cfg, args), args.k_bits, rep)
    finally:
        _finish(args, ctl)
    target = args.target
    if target is None:
        target = int(np.random.default_rng(derive_seed(args.seed, 0x5E)).integers(args.n))
    if not 0 <= target < args.n:
        raise ConfigError("--target must lie in [0, n)")
    items = range(args.n)
    try:
        res = parallel_las_vegas_search(items, lambda x: x == target, shared, args.parts)
    except NotFound as exc:
        rep.line(str(exc))
        return EXIT_FAILURE
    sets = probe_sets(args.n, shared, args.parts)
    assigned = [len(s) for s in sets]
    rep.line(f"== search n={args.n}, p={args.parts} ==")
    rep.table(["node", "assigned", "probes"],
              [[i, assigned[i], res.probes_per_node[i]] for i in range(args.parts)])
    rep.line(f"found index {res.index} at node {res.winner} after {res.rounds} rounds; "
             f"total probes {res.total_probes} <= n={args.n}")
    rep.record(cmd="search", n=args.n, parts=args.parts, index=res.index, winner=res.winner,
               rounds=res.rounds, probes_per_node=list(res.probes_per_node))
    return EXIT_OK


def _finish(args, ctl: Controller) -> None:
    ctl.flush()
    if args.event_log:
        ctl.management.log.write(args.event_log)


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", help="topology file; a two-node link A-B when omitted")
    common.add_argument("--seed", type=int, default=0, help="run seed (u64)")
    common.add_argument("--ticks", type=int, default=200_000,
                        help="longest wait, in ticks, for any single blocking step")
    common.add_argument("--records", help="write JSON-lines records to this file")
    common.add_argument("--event-log", help="write the management event log to this file")
    common.add_argument("--parallel-nodes", action="store_true",
                        help="process node contexts concurrently (same results)")

    p = argparse.ArgumentParser(prog="qoverlay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("qkd", parents=[common], help="run BB84 sessions and tabulate key rates")
    s.add_argument("--link", help="link as A-B (default: first link)")
    s.add_argument("--pulses", type=int, default=None)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--loss", type=float, nargs="+", help="loss probabilities to sweep")
    s.add_argument("--eavesdropper", choices=[e.value for e in Eavesdropper])
    s.set_defaults(func=cmd_qkd)

    s = sub.add_parser("circuit", parents=[common], help="transfer a file over a circuit")
    route = s.add_mutually_exclusive_group()
    route.add_argument("--path", help="path name from the topology")
    route.add_argument("--link", help="link as A-B")
    s.add_argument("--kind", choices=sorted(KIND_ALIASES), default="bytestream")
    s.add_argument("--input", help="file to send (default: --size seeded random bytes)")
    s.add_argument("--size", type=int, default=65536)
    s.add_argument("--drop", type=float, help="override every channel's drop probability")
    s.add_argument("--cipher-mode", choices=[m.value for m in CipherMode], default="keyed_stream")
    s.add_argument("--max-datagram", type=int, default=1024)
    s.add_argument("--settle", type=int, default=64, help="ticks to wait for lossy datagrams")
    s.set_defaults(func=cmd_circuit)

    s = sub.add_parser("syncrand", parents=[common], help="draw synchronized random numbers")
    route = s.add_mutually_exclusive_group()
    route.add_argument("--path")
    route.add_argument("--link")
    s.add_argument("--draws", type=int, default=100)
    s.add_argument("--bits", type=int, default=32)
    s.add_argument("--echo-period", type=int, default=16)
    s.set_defaults(func=cmd_syncrand)

    s = sub.add_parser("montecarlo", parents=[common], help="partitioned Monte Carlo integration")
    route = s.add_mutually_exclusive_group()
    route.add_argument("--path")
    route.add_argument("--link")
    s.add_argument("--estimand", default="quarter_circle")
    s.add_argument("--strategy", choices=["circular", "axis", "unfolded"], default="axis")
    s.add_argument("--parts", type=int, default=2)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--samples", type=int, default=400_000, help="total samples over all regions")
    s.add_argument("--k-bits", type=int, default=32)
    s.add_argument("--fail-node", type=int, action="append", default=[],
                   help="simulate a node that never reports")
    s.set_defaults(func=cmd_montecarlo)

    s = sub.add_parser("search", parents=[common], help="partitioned Las Vegas search")
    route = s.add_mutually_exclusive_group()
    route.add_argument("--path")
    route.add_argument("--link")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--parts", type=int, default=4)
    s.add_argument("--target", type=int, default=None, help="index to find (default: seeded)")
    s.add_argument("--k-bits", type=int, default=64)
    s.set_defaults(func=cmd_search)
    return p


def main(argv: list[str] | None = None, out: TextIO | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = out or sys.stdout
    records = open(args.records, "w") if args.records else None
    rep = Reporter(out, records)
    try:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        return args.func(args, rep)
    except (ConfigError, InvalidInput) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _PROTOCOL_ERRORS as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if records is not None:
            records.close()


if __name__ == "__main__":
    sys.exit(main())
