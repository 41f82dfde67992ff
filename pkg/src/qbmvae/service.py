"""TCP sampling service: clients ship a coupling matrix and get spin or
binary samples back.

Wire protocol "qsrv/1": each message is a 4-byte big-endian length prefix
followed by a UTF-8 payload of flat `key=value` lines (one per line, no
nesting).  Full field tables live in docs/protocol.md.  The service is
stateless between jobs; every job carries its own seed, so responses are
reproducible and concurrent clients cannot perturb each other.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import energy as en
from .samplers import (AnnealSchedule, SampleSet, default_schedule,
                       gibbs_sample, simulated_annealing)
from .textio import fmt

PROTOCOL_VERSION = "qsrv/1"
MAX_MESSAGE_BYTES = 64 * 1024 * 1024
DEFAULT_MAX_PROBLEM = 4096


@dataclass(frozen=True)
class SampleJob:
    """One sampling request: the problem as a strict upper triangle plus
    bias, the variable kind wanted back, and the sampler settings."""

    job_id: str
    n: int
    upper: np.ndarray
    bias: np.ndarray
    kind: str
    n_samples: int
    seed: int
    temperature: float = 1.0
    schedule: AnnealSchedule | None = None
    n_sweeps: int = 1
    burn_in: int = 100
    n_chains: int = 16

    def __post_init__(self):
        upper = np.asarray(self.upper, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "bias", bias)
        if self.n < 1:
            raise ValueError("n must be positive")
        want = self.n * (self.n - 1) // 2
        if upper.shape != (want,):
            raise ValueError(f"upper triangle needs {want} entries for n={self.n}")
        if bias.shape != (self.n,):
            raise ValueError(f"bias needs {self.n} entries")
        if self.kind not in ("binary", "spin"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not self.job_id:
            raise ValueError("job_id must be non-empty")


# ------------------------------------------------------------------ framing

def send_message(sock: socket.socket, fields: dict) -> None:
    payload = "".join(f"{k}={v}\n" for k, v in fields.items()).encode("utf-8")
    sock.sendall(len(payload).to_bytes(4, "big") + payload)


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    while count:
        part = sock.recv(count)
        if not part:
            raise ConnectionError("peer closed mid-message")
        chunks.append(part)
        count -= len(part)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> dict:
    size = int.from_bytes(_recv_exact(sock, 4), "big")
    if size > MAX_MESSAGE_BYTES:
        raise ValueError(f"message of {size} bytes exceeds the frame limit")
    fields = {}
    for line in _recv_exact(sock, size).decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {line!r}: expected key=value")
        fields[key] = value
    return fields


def _floats_field(values) -> str:
    return " ".join(fmt(float(v)) for v in np.asarray(values, dtype=np.float64))


def _parse_float_list(text: str, expect: int, what: str) -> np.ndarray:
    parts = text.split() if text else []
    if len(parts) != expect:
        raise ValueError(f"{what}: expected {expect} numbers, got {len(parts)}")
    return np.array([float(p) for p in parts], dtype=np.float64)


def job_to_fields(job: SampleJob) -> dict:
    fields = {
        "type": "sample",
        "version": PROTOCOL_VERSION,
        "job_id": job.job_id,
        "n": job.n,
        "upper": _floats_field(job.upper),
        "bias": _floats_field(job.bias),
        "kind": job.kind,
        "n_samples": job.n_samples,
        "seed": job.seed,
        "temperature": fmt(job.temperature),
        # extension keys beyond the core field set; see docs/protocol.md
        "n_sweeps": job.n_sweeps,
        "burn_in": job.burn_in,
        "n_chains": job.n_chains,
    }
    if job.schedule is not None:
        s = job.schedule
        fields["schedule"] = (f"{fmt(s.t_start)} {fmt(s.t_end)} "
                              f"{s.n_steps} {s.shape}")
    return fields


def job_from_fields(fields: dict) -> SampleJob:
    for key in ("job_id", "n", "upper", "bias", "kind", "n_samples", "seed"):
        if key not in fields:
            raise ValueError(f"missing field {key!r}")
    n = int(fields["n"])
    if n < 1:
        raise ValueError("n must be positive")
    schedule = None
    if "schedule" in fields:
        parts = fields["schedule"].split()
        if len(parts) != 4:
            raise ValueError("schedule needs 't_start t_end n_steps shape'")
        schedule = AnnealSchedule(float(parts[0]), float(parts[1]),
                                  int(parts[2]), parts[3])
    return SampleJob(
        job_id=fields["job_id"],
        n=n,
        upper=_parse_float_list(fields["upper"], n * (n - 1) // 2, "upper"),
        bias=_parse_float_list(fields["bias"], n, "bias"),
        kind=fields["kind"],
        n_samples=int(fields["n_samples"]),
        seed=int(fields["seed"]),
        temperature=float(fields.get("temperature", "1.0")),
        schedule=schedule,
        n_sweeps=int(fields.get("n_sweeps", "1")),
        burn_in=int(fields.get("burn_in", "100")),
        n_chains=int(fields.get("n_chains", "16")))


def run_job(job: SampleJob) -> SampleSet:
    """Execute a job with the in-process samplers; the equivalence anchor
    for the whole service (same inputs, same bytes)."""
    if job.kind == "binary":
        bm = en.bm_from_upper(job.n, job.upper, job.bias)
        return gibbs_sample(bm, job.n_samples, n_sweeps=job.n_sweeps,
                            burn_in=job.burn_in, temperature=job.temperature,
                            seed=job.seed, n_chains=job.n_chains)
    J = np.zeros((job.n, job.n))
    iu = np.triu_indices(job.n, k=1)
    J[iu] = job.upper
    problem = en.IsingProblem(job.n, J + J.T, job.bias)
    schedule = job.schedule or default_schedule(job.n)
    _, _, finals = simulated_annealing(problem, schedule, job.n_samples, job.seed)
    return finals


def sample_set_to_fields(job_id: str, s: SampleSet, elapsed_ms: float) -> dict:
    digits = "".join("".join("1" if v == 1 else ("0" if v == 0 else "-")
                             for v in row) for row in s.samples)
    # spin rows encode -1 as '-'; decoded by kind on the far side
    return {
        "type": "result",
        "version": PROTOCOL_VERSION,
        "job_id": job_id,
        "n": s.n,
        "n_samples": s.n_samples,
        "kind": s.variable_kind,
        "samples": digits,
        "energies": _floats_field(s.energies),
        "seed": s.seed,
        "sampler": s.sampler_id,
        "sweeps_per_sample": s.sweeps_per_sample,
        "burn_in": s.burn_in,
        "temperature": fmt(s.temperature),
        "elapsed_ms": fmt(elapsed_ms),
    }


def sample_set_from_fields(fields: dict) -> SampleSet:
    n = int(fields["n"])
    count = int(fields["n_samples"])
    digits = fields["samples"]
    if len(digits) != n * count:
        raise ValueError(f"samples field has {len(digits)} digits, "
                         f"expected {n * count}")
    flat = np.array([1 if c == "1" else (0 if c == "0" else -1)
                     for c in digits], dtype=np.int8)
    samples = flat.reshape(count, n)
    energies = _parse_float_list(fields["energies"], count, "energies")
    return SampleSet(samples, energies, fields["kind"], int(fields["seed"]),
                     fields.get("sampler", "remote"),
                     int(fields.get("sweeps_per_sample", "1")),
                     int(fields.get("burn_in", "0")),
                     float(fields.get("temperature", "1.0")))


# ------------------------------------------------------------------- server

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                fields = recv_message(self.request)
            except (ConnectionError, OSError):
                return
            except ValueError as exc:
                self._send_error("?", f"bad frame: {exc}")
                return
            try:
                kind = fields.get("type", "")
                if kind == "hello":
                    send_message(self.request, {
                        "type": "hello",
                        "version": PROTOCOL_VERSION,
                        "max_problem_size": self.server.max_problem_size,
                    })
                elif kind == "sample":
                    self._handle_sample(fields)
                else:
                    self._send_error(fields.get("job_id", "?"),
                                     f"unknown message type {kind!r}")
            except Exception as exc:  # malformed input must not kill the server
                self._send_error(fields.get("job_id", "?"), str(exc))

    def _handle_sample(self, fields: dict) -> None:
        if fields.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
            self._send_error(fields.get("job_id", "?"),
                             f"version mismatch: server speaks {PROTOCOL_VERSION}")
            return
        job = job_from_fields(fields)
        if job.n > self.server.max_problem_size:
            self._send_error(job.job_id,
                             f"capacity: n={job.n} exceeds limit "
                             f"{self.server.max_problem_size}")
            return
        started = time.monotonic()
        result = run_job(job)
        elapsed_ms = (time.monotonic() - started) * 1000.0
        send_message(self.request,
                     sample_set_to_fields(job.job_id, result, elapsed_ms))

    def _send_error(self, job_id: str, message: str) -> None:
        try:
            send_message(self.request, {
                "type": "error",
                "version": PROTOCOL_VERSION,
                "job_id": job_id,
                "message": message.replace("\n", " "),
            })
        except OSError:
            pass


class SamplerServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; start()/shutdown() for tests, serve() to block."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: str = "127.0.0.1", port: int = 0,
                 max_problem_size: int = DEFAULT_MAX_PROBLEM):
        super().__init__((address, port), _Handler)
        self.max_problem_size = max_problem_size
        self._thread = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)


def serve(address: str = "127.0.0.1", port: int = 7700,
          max_problem_size: int = DEFAULT_MAX_PROBLEM,
          worker_count: int = 8, announce=print) -> None:
    """Blocking entry point; worker_count is advisory (the server threads
    per connection), kept for interface stability."""
    server = SamplerServer(address, port, max_problem_size)
    announce(f"listening on {server.server_address[0]}:{server.port}")
    try:
        server.serve_forever()
    finally:
        server.server_close()


# ------------------------------------------------------------------- client

def client_hello(address: str, port: int, timeout: float = 10.0) -> dict:
    with socket.create_connection((address, port), timeout=timeout) as sock:
        send_message(sock, {"type": "hello", "version": PROTOCOL_VERSION})
        reply = recv_message(sock)
    if reply.get("type") != "hello":
        raise RuntimeError(f"unexpected reply type {reply.get('type')!r}")
    if reply.get("version") != PROTOCOL_VERSION:
        raise RuntimeError(f"protocol version mismatch: {reply.get('version')!r}")
    return reply


def client_submit(address: str, port: int, job: SampleJob,
                  timeout: float = 60.0) -> SampleSet:
    """Blocking round trip; raises on timeout, version mismatch, or a
    structured error reply (capacity included) with no partial results."""
    with socket.create_connection((address, port), timeout=timeout) as sock:
        send_message(sock, job_to_fields(job))
        reply = recv_message(sock)
    kind = reply.get("type")
    if kind == "error":
        raise RuntimeError(f"service error for job {reply.get('job_id')}: "
                           f"{reply.get('message')}")
    if kind != "result":
        raise RuntimeError(f"unexpected reply type {kind!r}")
    if reply.get("version") != PROTOCOL_VERSION:
        raise RuntimeError(f"protocol version mismatch: {reply.get('version')!r}")
    if reply.get("job_id") != job.job_id:
        raise RuntimeError(f"job id mismatch: sent {job.job_id}, "
                           f"got {reply.get('job_id')}")
    return sample_set_from_fields(reply)
