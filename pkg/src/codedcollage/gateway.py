"""Newline-delimited wire protocol and a live collage-dispatch gateway.

One text line per message, space-separated fields, request ids carried
end to end so responses may arrive out of order:

    req <id> <image_ref>                   classify request
    resp <id> <class_id>                   classify response
    creq <id> <image_ref>                  collage classify request
    cresp <id> <n> (<cx> <cy> <w> <h> <class_id> <confidence>)*n
    err <id> <reason>

image_ref and reason are opaque single tokens (no whitespace). Floats
are rendered with repr() so parse(frame(m)) is exact.

LiveGateway drives one connection per worker plus one collage
connection. Reader threads only timestamp and enqueue arrivals; all
policy runs on the calling thread through codec.decode/recover, the
same functions the simulator uses, never a parallel implementation.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Union

from .codec import (
    DEFAULT_DETECTION_THRESHOLD,
    CellPredictions,
    Detection,
    build_layout,
    decode,
    recover,
)
from .geometry import Box

__all__ = [
    "ProtocolError",
    "UnknownKindError",
    "ArityError",
    "FieldError",
    "ClassifyRequest",
    "ClassifyResponse",
    "CollageRequest",
    "CollageResponse",
    "ErrorReply",
    "WireMessage",
    "frame",
    "parse",
    "LiveBatchResult",
    "LiveGateway",
]


class ProtocolError(ValueError):
    """A message that cannot be framed or parsed."""


class UnknownKindError(ProtocolError):
    """Line starts with an unrecognized kind tag."""


class ArityError(ProtocolError):
    """Right tag, wrong number of fields."""


class FieldError(ProtocolError):
    """A field that does not parse as its declared type."""


@dataclass(frozen=True)
class ClassifyRequest:
    request_id: int
    image_ref: str


@dataclass(frozen=True)
class ClassifyResponse:
    request_id: int
    class_id: int


@dataclass(frozen=True)
class CollageRequest:
    request_id: int
    image_ref: str


@dataclass(frozen=True)
class CollageResponse:
    request_id: int
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class ErrorReply:
    request_id: int
    reason: str


WireMessage = Union[
    ClassifyRequest, ClassifyResponse, CollageRequest, CollageResponse, ErrorReply
]


def _check_id(request_id: int) -> int:
    if not (0 <= request_id < 2**64):
        raise ProtocolError(f"request_id {request_id} outside [0, 2^64)")
    return request_id


def _check_token(value: str, what: str) -> str:
    if not value or any(ch.isspace() for ch in value):
        raise ProtocolError(
            f"{what} must be a nonempty token without whitespace: {value!r}"
        )
    return value


def frame(msg: WireMessage) -> str:
    """Render a message as one line (no trailing newline)."""
    if isinstance(msg, ClassifyRequest):
        return f"req {_check_id(msg.request_id)} {_check_token(msg.image_ref, 'image_ref')}"
    if isinstance(msg, ClassifyResponse):
        if msg.class_id < 0:
            raise ProtocolError(f"class_id must be nonnegative, got {msg.class_id}")
        return f"resp {_check_id(msg.request_id)} {msg.class_id}"
    if isinstance(msg, CollageRequest):
        return f"creq {_check_id(msg.request_id)} {_check_token(msg.image_ref, 'image_ref')}"
    if isinstance(msg, CollageResponse):
        parts = [f"cresp {_check_id(msg.request_id)} {len(msg.detections)}"]
        for d in msg.detections:
            parts.append(
                f"{d.box.cx!r} {d.box.cy!r} {d.box.w!r} {d.box.h!r} "
                f"{d.class_id} {d.confidence!r}"
            )
        return " ".join(parts)
    if isinstance(msg, ErrorReply):
        return f"err {_check_id(msg.request_id)} {_check_token(msg.reason, 'reason')}"
    raise TypeError(f"not a wire message: {msg!r}")


def _parse_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise FieldError(f"{what}: not an integer: {text!r}") from exc


def _parse_float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise FieldError(f"{what}: not a number: {text!r}") from exc


def _parse_id(text: str) -> int:
    rid = _parse_int(text, "request_id")
    if not (0 <= rid < 2**64):
        raise FieldError(f"request_id {rid} outside [0, 2^64)")
    return rid


def parse(line: str) -> WireMessage:
    """Inverse of frame: parse one line into a message.

    Raises UnknownKindError, ArityError, or FieldError depending on what
    is wrong with the line.
    """
    fields = line.split()
    if not fields:
        raise ArityError("empty line")
    tag, rest = fields[0], fields[1:]
    if tag == "req" or tag == "creq":
        if len(rest) != 2:
            raise ArityError(f"{tag} expects 2 fields, got {len(rest)}")
        cls = ClassifyRequest if tag == "req" else CollageRequest
        return cls(_parse_id(rest[0]), rest[1])
    if tag == "resp":
        if len(rest) != 2:
            raise ArityError(f"resp expects 2 fields, got {len(rest)}")
        class_id = _parse_int(rest[1], "class_id")
        if class_id < 0:
            raise FieldError(f"class_id must be nonnegative, got {class_id}")
        return ClassifyResponse(_parse_id(rest[0]), class_id)
    if tag == "err":
        if len(rest) != 2:
            raise ArityError(f"err expects 2 fields, got {len(rest)}")
        return ErrorReply(_parse_id(rest[0]), rest[1])
    if tag == "cresp":
        if len(rest) < 2:
            raise ArityError(f"cresp expects at least 2 fields, got {len(rest)}")
        rid = _parse_id(rest[0])
        count = _parse_int(rest[1], "detection count")
        if count < 0:
            raise FieldError(f"detection count must be nonnegative, got {count}")
        body = rest[2:]
        if len(body) != 6 * count:
            raise ArityError(
                f"cresp with {count} detections expects {6 * count} payload "
                f"fields, got {len(body)}"
            )
        dets = []
        for j in range(count):
            cx, cy, w, h = (
                _parse_float(body[6 * j + i], f"detection {j} box field {i}")
                for i in range(4)
            )
            class_id = _parse_int(body[6 * j + 4], f"detection {j} class_id")
            confidence = _parse_float(body[6 * j + 5], f"detection {j} confidence")
            try:
                dets.append(Detection(Box(cx, cy, w, h), class_id, confidence))
            except ValueError as exc:
                raise FieldError(f"detection {j}: {exc}") from exc
        return CollageResponse(rid, tuple(dets))
    raise UnknownKindError(f"unknown message kind {tag!r}")


@dataclass(frozen=True)
class Arrival:
    link: int  # worker index, or -1 for the collage link
    message: WireMessage
    t: float  # monotonic receive time


class _Link:
    """One worker connection: coordinator writes, a reader thread enqueues."""

    def __init__(self, index: int, address: tuple[str, int], events: "queue.Queue[Arrival]"):
        self.index = index
        self.sock = socket.create_connection(address)
        self._wfile = self.sock.makefile("wb")
        self._reader = threading.Thread(
            target=self._read_loop,
            args=(self.sock.makefile("rb"), index, events),
            daemon=True,
        )
        self._reader.start()

    def send(self, msg: WireMessage) -> None:
        self._wfile.write((frame(msg) + "\n").encode("ascii"))
        self._wfile.flush()

    @staticmethod
    def _read_loop(rfile, index: int, events: "queue.Queue[Arrival]") -> None:
        for raw in rfile:
            t = time.monotonic()
            try:
                msg: WireMessage = parse(raw.decode("ascii"))
            except ProtocolError:
                msg = ErrorReply(0, "unparseable_line")
            events.put(Arrival(index, msg, t))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclass
class LiveBatchResult:
    """What the gateway decided and observed for one batch."""

    final: list[Optional[int]]
    used_collage: set[int]
    needs_replication: set[int]
    collage_on_time: bool
    scnn_at_decision: list[Optional[int]]
    detections: tuple[Detection, ...] = field(default_factory=tuple)


class LiveGateway:
    """Collage-strategy dispatch over live sockets.

    Policy state lives entirely on the thread calling run_batch; reader
    threads never touch it. Replica requests reuse the straggler's own
    connection under a fresh request id (stub workers answer each
    request in its own thread, so a sleeping original does not delay its
    replica).
    """

    def __init__(
        self,
        worker_addrs: list[tuple[str, int]],
        collage_addr: tuple[str, int],
        k: int,
        *,
        detection_threshold: float = DEFAULT_DETECTION_THRESHOLD,
        collage_timeout_s: float = 1.0,
    ):
        if k * k != len(worker_addrs):
            raise ValueError(
                f"k = {k} implies {k * k} workers, got {len(worker_addrs)}"
            )
        if collage_timeout_s <= 0:
            raise ValueError(f"collage_timeout_s must be positive, got {collage_timeout_s}")
        self.layout = build_layout(k)
        self.detection_threshold = detection_threshold
        self.collage_timeout_s = collage_timeout_s
        self.events: "queue.Queue[Arrival]" = queue.Queue()
        self.workers = [
            _Link(i, addr, self.events) for i, addr in enumerate(worker_addrs)
        ]
        self.collage = _Link(-1, collage_addr, self.events)
        self._next_id = 1

    def __enter__(self) -> "LiveGateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        for link in self.workers:
            link.close()
        self.collage.close()

    def _new_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def run_batch(
        self,
        worker_refs: list[str],
        replica_refs: list[str],
        collage_ref: str,
        *,
        batch_timeout_s: float = 30.0,
    ) -> LiveBatchResult:
        """Dispatch one batch and resolve every request.

        worker_refs[i] goes to worker i; replica_refs[i] is used if
        request i ends up replicated. Stale responses from earlier
        batches (request ids no longer tracked) are ignored.
        """
        n = len(self.workers)
        if len(worker_refs) != n or len(replica_refs) != n:
            raise ValueError(f"need {n} worker_refs and replica_refs")
        t0 = time.monotonic()
        hard_deadline = t0 + batch_timeout_s

        roles: dict[int, tuple[str, int]] = {}
        collage_id = self._new_id()
        self.collage.send(CollageRequest(collage_id, collage_ref))
        for i in range(n):
            rid = self._new_id()
            roles[rid] = ("orig", i)
            self.workers[i].send(ClassifyRequest(rid, worker_refs[i]))

        collage_resp: Optional[tuple[tuple[Detection, ...], float]] = None
        drained: list[Arrival] = []

        # Phase 1: wait for the collage response or its deadline, then pull
        # whatever else is already queued so the decision sees every event
        # that beat the decision point (a collage response can race the
        # deadline; resp timestamps can interleave across reader threads).
        collage_deadline = t0 + self.collage_timeout_s
        while collage_resp is None:
            remaining = collage_deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                ev = self.events.get(timeout=remaining)
            except queue.Empty:
                break
            drained.append(ev)
            msg = ev.message
            if isinstance(msg, CollageResponse) and msg.request_id == collage_id:
                collage_resp = (msg.detections, ev.t)
        while True:
            try:
                drained.append(self.events.get_nowait())
            except queue.Empty:
                break
        if collage_resp is None:
            for ev in drained:
                msg = ev.message
                if (
                    isinstance(msg, CollageResponse)
                    and msg.request_id == collage_id
                    and ev.t <= collage_deadline
                ):
                    collage_resp = (msg.detections, ev.t)
                    break

        on_time = collage_resp is not None
        decision_t = collage_resp[1] if on_time else collage_deadline

        arrivals: dict[int, tuple[int, float]] = {}  # slot -> (class, t)
        stashed: list[Arrival] = []  # after the decision point; feeds phase 2
        for ev in drained:
            msg = ev.message
            if isinstance(msg, ClassifyResponse) and msg.request_id in roles:
                _, slot = roles[msg.request_id]
                if ev.t <= decision_t and slot not in arrivals:
                    arrivals[slot] = (msg.class_id, ev.t)
                else:
                    stashed.append(ev)
            elif isinstance(msg, ErrorReply) and (
                msg.request_id in roles or msg.request_id == collage_id
            ):
                raise RuntimeError(
                    f"worker error for request {msg.request_id}: {msg.reason}"
                )
            # Collage responses were handled above; stale ids are dropped.

        avail: list[Optional[int]] = [
            arrivals[i][0] if i in arrivals else None for i in range(n)
        ]
        if on_time:
            assert collage_resp is not None
            cells = decode(collage_resp[0], self.layout, self.detection_threshold)
        else:
            cells = CellPredictions((None,) * n)
        final, used_collage, needs_replication = recover(avail, cells)

        # Phase 2: replicate the unresolved slots and wait for the races.
        for i in sorted(needs_replication):
            rid = self._new_id()
            roles[rid] = ("replica", i)
            self.workers[i].send(ClassifyRequest(rid, replica_refs[i]))

        unresolved = set(needs_replication)
        pending = list(stashed)
        while unresolved:
            if pending:
                ev = pending.pop(0)
            else:
                remaining = hard_deadline - time.monotonic()
                if remaining <= 0:
                    raise RuntimeError(
                        f"batch timed out waiting for slots {sorted(unresolved)}"
                    )
                try:
                    ev = self.events.get(timeout=remaining)
                except queue.Empty:
                    continue
            msg = ev.message
            if isinstance(msg, ClassifyResponse) and msg.request_id in roles:
                _, slot = roles[msg.request_id]
                if slot in unresolved:
                    final[slot] = msg.class_id
                    unresolved.discard(slot)
            elif isinstance(msg, ErrorReply) and msg.request_id in roles:
                raise RuntimeError(f"worker error for request {msg.request_id}: {msg.reason}")
            # Late collage responses and stale ids are dropped.

        return LiveBatchResult(
            final=final,
            used_collage=used_collage,
            needs_replication=needs_replication,
            collage_on_time=on_time,
            scnn_at_decision=avail,
            detections=collage_resp[0] if collage_resp is not None else (),
        )
