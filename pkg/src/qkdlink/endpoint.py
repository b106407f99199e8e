"""Endpoint engines: a full run for Alice or Bob over a public channel.

Each engine owns its conversation, its reconciler and its own seeds; the
two share nothing but the channel and the simulated quantum link. Loopback
runs both engines on threads of one process.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qkdlink import net
from qkdlink.config import RunConfig
from qkdlink.core import derive_seed, pack_bits
from qkdlink.metrics import QberSeries, SessionReport, build_report, windowed_qber
from qkdlink.net import MsgType
from qkdlink.postproc import hashing, ldpc
from qkdlink.postproc.reconcile import AliceReconciler, BobReconciler, EpochOutcome
from qkdlink.protocol import MemoryFiber, SessionConfig, StreamFiber, alice_session, bob_session

log = logging.getLogger(__name__)

FIRST_SESSION_ID = 1


@dataclass
class EndpointResult:
    role: str
    epochs: list[EpochOutcome] = field(default_factory=list)
    sifted_bits: int = 0
    raw_detections: int = 0
    slots: int = 0
    session_ids: list[int] = field(default_factory=list)

    @property
    def alarm(self) -> bool:
        return any(e.alarm for e in self.epochs)

    @property
    def key(self) -> np.ndarray:
        """Concatenated final key; empty after an alarm."""
        if self.alarm:
            return np.zeros(0, dtype=np.uint8)
        ks = [e.key for e in self.epochs if e.key is not None]
        return np.concatenate(ks) if ks else np.zeros(0, dtype=np.uint8)

    @property
    def verified_bits(self) -> int:
        return sum(e.n_verified for e in self.epochs if not e.alarm)

    def error_flags(self) -> np.ndarray:
        fl = [e.error_flags for e in self.epochs if e.error_flags is not None]
        return np.concatenate(fl) if fl else np.zeros(0, dtype=np.uint8)

    def series(self, window_bytes: int) -> QberSeries:
        return windowed_qber(self.error_flags(), window_bytes)

    def mean_epoch_qber(self) -> float:
        w = [(e.qber, e.attempted) for e in self.epochs]
        total = sum(a for _, a in w)
        return sum(q * a for q, a in w) / total if total else 0.0

    def report(self, cfg: RunConfig) -> SessionReport:
        key = self.key
        return build_report(
            sifted_bits=self.sifted_bits,
            verified_bits=min(self.verified_bits, self.sifted_bits),
            secret_bits=int(key.size),
            series=self.series(cfg.window_bytes),
            alarm=self.alarm,
            slots=max(self.slots, 1),
            pulse_rate_hz=cfg.link.pulse_rate_hz,
            duty_cycle=cfg.duty_cycle,
            fallback_qber=self.mean_epoch_qber(),
        )


def _master_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        import secrets

        cfg.seed = secrets.randbits(64)
    return cfg.seed


def _session_config(cfg: RunConfig, sid: int) -> SessionConfig:
    return SessionConfig(cfg.trains_per_session, cfg.pulses_per_train, cfg.effective_link(), derive_seed(cfg.seed, "session", sid))


def _shipped(rate: float) -> ldpc.LdpcCode:
    return ldpc.shipped_code(rate)


def run_alice(cfg: RunConfig, channel: net.PublicChannel, fiber) -> EndpointResult:
    master = _master_seed(cfg)
    conv = net.Conversation(channel, net.ALICE)
    res = EndpointResult("alice")
    conv.send(MsgType.HELLO, net.encode_hello(net.ALICE, FIRST_SESSION_ID))
    conv.receive(MsgType.HELLO)
    rec = AliceReconciler(conv, cfg.pa, cfg.policy, _shipped, hashing.SeedSource(master, "alice-hash"))
    for k in range(cfg.sessions):
        sid = FIRST_SESSION_ID + k
        block = alice_session(conv, fiber, _session_config(cfg, sid), sid)
        res.session_ids.append(sid)
        res.sifted_bits += len(block)
        res.slots += cfg.trains_per_session * cfg.pulses_per_train
        rec.extend(block.bits)
        res.epochs.extend(rec.process_available())
        log.info("alice: session %d sifted %d bits", sid, len(block))
        if rec.alarmed:
            break
    if not rec.alarmed:
        res.epochs.extend(rec.flush())
    return res


def run_bob(cfg: RunConfig, channel: net.PublicChannel, fiber) -> EndpointResult:
    _master_seed(cfg)
    conv = net.Conversation(channel, net.BOB)
    res = EndpointResult("bob")
    hello = conv.receive(MsgType.HELLO)
    _, first = net.decode_hello(hello.payload)
    conv.send(MsgType.HELLO, net.encode_hello(net.BOB, first))
    rec = BobReconciler(conv, cfg.pa, cfg.policy, _shipped, ldpc.SHIPPED_N)
    last_sid = first - 1
    while not rec.alarmed:
        try:
            frame = conv.receive(MsgType.SESSION_START, MsgType.SYNDROME, MsgType.PA_SEED, MsgType.ALARM)
        except net.TransportError:
            if conv.at_rest:
                break
            raise
        if frame.msg_type == MsgType.SESSION_START:
            sid = frame.session_id
            if sid <= last_sid:
                conv.abort(f"session id {sid} not increasing")
                raise net.ProtocolViolation(f"session id {sid} after {last_sid}")
            last_sid = sid
            sess = _session_config(cfg, sid)
            block, detections = bob_session(conv, fiber, sess.link, sess.session_seed, frame)
            res.session_ids.append(sid)
            res.sifted_bits += len(block)
            res.raw_detections += detections
            res.slots += sess.slots
            rec.extend(block.bits)
            log.info("bob: session %d sifted %d of %d detections", sid, len(block), detections)
        else:
            out = rec.handle(frame)
            if out is not None:
                res.epochs.append(out)
    return res


def run_loopback(cfg: RunConfig, capture=None) -> tuple[EndpointResult, EndpointResult]:
    """Both engines in one process over an in-memory channel pair.

    ``capture`` (binary file) logs every frame Alice sends or receives.
    """
    import copy

    _master_seed(cfg)
    a_ch, b_ch = net.memory_channels(cfg.timeout, (capture, None))
    fiber = MemoryFiber(cfg.timeout)
    # separate config objects so the engines share no mutable state
    a_cfg, b_cfg = copy.deepcopy(cfg), copy.deepcopy(cfg)
    out: dict = {}

    def bob():
        try:
            out["bob"] = run_bob(b_cfg, b_ch, fiber)
        except BaseException as exc:
            out["bob_error"] = exc
            b_ch.close()

    worker = threading.Thread(target=bob, name="bob", daemon=True)
    worker.start()
    try:
        alice = run_alice(a_cfg, a_ch, fiber)
    finally:
        a_ch.close()
        fiber.close()
        worker.join()
    if "bob_error" in out:
        raise out["bob_error"]
    return alice, out["bob"]


def run_networked(cfg: RunConfig, capture=None) -> EndpointResult:
    """Alice dials, Bob listens; the quantum link uses a second connection."""
    if cfg.role == "bob":
        public = net.tcp_listen(cfg.address, cfg.timeout)
        quantum = net.tcp_listen(cfg.quantum_addr, cfg.timeout)
        runner = run_bob
    else:
        public = net.tcp_dial(cfg.address, cfg.timeout)
        quantum = net.tcp_dial(cfg.quantum_addr, cfg.timeout)
        runner = run_alice
    quantum.timeout = cfg.timeout
    channel = net.PublicChannel(public, cfg.timeout, capture)
    try:
        return runner(cfg, channel, StreamFiber(quantum))
    finally:
        channel.close()
        quantum.close()


# -- artifacts -----------------------------------------------------------------


def write_key_files(result: EndpointResult, out_dir: Path, cfg: RunConfig) -> tuple[Path, Path]:
    """Raw key bytes (zero padded to a byte) and the text manifest beside them."""
    out_dir.mkdir(parents=True, exist_ok=True)
    key = result.key
    key_path = out_dir / f"{result.role}_key.bin"
    key_path.write_bytes(pack_bits(key))
    lines = [
        f"role = {result.role}",
        f"key_bits = {key.size}",
        f"key_bytes = {(key.size + 7) // 8}",
        f"sessions = {' '.join(map(str, result.session_ids))}",
        f"sifted_bits = {result.sifted_bits}",
        f"alarm = {int(result.alarm)}",
        f"mean_qber = {result.mean_epoch_qber()!r}",
        f"eps_pa = {cfg.pa.eps_pa!r}",
        f"qber_abort_threshold = {cfg.pa.qber_abort_threshold!r}",
        f"ec_efficiency_f = {cfg.pa.ec_efficiency_f!r}",
        "# epoch: sessions, blocks attempted/kept, n_verified, qber, leak_ec, leak_verify, key_length, digest_ok",
    ]
    for e in result.epochs:
        lines.append(
            f"epoch {e.epoch}: sessions={','.join(map(str, e.session_ids))} attempted={e.attempted} kept={e.kept} "
            f"n_verified={e.n_verified} qber={e.qber!r} leak_ec={e.leak_ec} leak_verify={e.leak_verify} "
            f"key_length={e.key_length} digest_ok={int(e.digest_ok)} alarm={int(e.alarm)}"
        )
    manifest = out_dir / f"{result.role}_key.manifest"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return key_path, manifest


def write_reports(result: EndpointResult, out_dir: Path, cfg: RunConfig) -> SessionReport:
    out_dir.mkdir(parents=True, exist_ok=True)
    report = result.report(cfg)
    (out_dir / f"{result.role}_report.csv").write_text(SessionReport.csv_header() + "\n" + report.csv_line() + "\n", encoding="utf-8")
    if result.role == "bob":
        (out_dir / "qber.csv").write_text(result.series(cfg.window_bytes).to_csv(), encoding="utf-8")
    return report
