"""Teacher server and student client over newline-delimited JSON frames.

The teacher process owns selection and the replay buffer and acts as a
server; the student process runs the rollout loop as a client. Each
connection is strict request/reply with one outstanding request. Frames are
single-line JSON objects; every frame carries a protocol version and a
per-sender sequence number that increases strictly within a connection.
``docs/protocol.md`` documents the format field by field.

Feedback handling is deliberately split: the acknowledgement is queued
before any teacher refinement runs, so the MAE a client sees in an ack is
always that of the most recently completed refinement. Refinements hold the
teacher lock, so a concurrent selection observes either the pre-update or
post-update model, never a mixture (sample frames carry ``model_version``
so this is checkable from outside).
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from dataclasses import dataclass, field

from goldilocks import students
from goldilocks.students import Question
from goldilocks.teacher import GoldilocksCoordinator, TeacherConfig, TeacherModel

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
FRAME_TYPES = ("request_sample", "sample", "feedback", "ack", "shutdown", "error")


class TransportError(RuntimeError):
    """Connection-level failure (timeout, reset, premature close); retriable."""


class ServerError(RuntimeError):
    """An explicit error frame from the server."""

    def __init__(self, code: str, reason: str):
        super().__init__(f"{code}: {reason}")
        self.code = code
        self.reason = reason


def encode_frame(frame: dict) -> bytes:
    return (json.dumps(frame, separators=(",", ":")) + "\n").encode("utf-8")


@dataclass
class SessionState:
    connection_id: int
    samples_served: int = 0
    feedback_received: int = 0
    pending: set = field(default_factory=set)


class _LineSocket:
    """Buffered line reader/writer over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buffer = b""

    def send_line(self, data: bytes) -> None:
        self.sock.sendall(data)

    def read_line(self) -> bytes | None:
        """One full line, or None when the peer closed the connection."""
        while b"\n" not in self._buffer:
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line


class TeacherServer:
    """Serves one coordinator to any number of student clients."""

    def __init__(self, coordinator: GoldilocksCoordinator, group_size: int,
                 host: str = "127.0.0.1", port: int = 0):
        self.coordinator = coordinator
        self.group_size = group_size
        self.sessions: list[SessionState] = []
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self.stopped = threading.Event()
        self._next_connection = 0
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "TeacherServer":
        self._acceptor.start()
        return self

    def wait(self, timeout: float | None = None) -> bool:
        return self.stopped.wait(timeout)

    def close(self) -> None:
        self._stop.set()
        self._acceptor.join(timeout=5.0)
        for t in self._threads:
            t.join(timeout=5.0)
        self._listener.close()
        self.stopped.set()

    # -- internals -----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            session = SessionState(connection_id=self._next_connection)
            self._next_connection += 1
            self.sessions.append(session)
            t = threading.Thread(target=self._serve_connection,
                                 args=(conn, session), daemon=True)
            self._threads.append(t)
            t.start()

    def _serve_connection(self, conn: socket.socket, session: SessionState) -> None:
        conn.settimeout(0.2)
        line_sock = _LineSocket(conn)
        seq = 0

        def reply(frame: dict) -> None:
            nonlocal seq
            seq += 1
            line_sock.send_line(encode_frame({"v": PROTOCOL_VERSION, **frame, "seq": seq}))

        try:
            while not self._stop.is_set():
                try:
                    line = line_sock.read_line()
                except socket.timeout:
                    continue
                except OSError:
                    break
                if line is None:
                    break
                if not self._dispatch(line, session, reply):
                    break
        finally:
            conn.close()

    def _dispatch(self, line: bytes, session: SessionState, reply) -> bool:
        """Handle one frame; returns False when the connection should close."""
        try:
            frame = json.loads(line)
            if not isinstance(frame, dict):
                raise ValueError("frame must be a JSON object")
        except ValueError as exc:
            reply({"type": "error", "code": "malformed-frame", "reason": str(exc)})
            return True
        if frame.get("v") != PROTOCOL_VERSION:
            reply({"type": "error", "code": "bad-version",
                   "reason": f"expected protocol version {PROTOCOL_VERSION}"})
            return True
        kind = frame.get("type")

        if kind == "request_sample":
            with self.coordinator.lock:
                question, mu, sigma, version = self.coordinator.select()
            session.samples_served += 1
            session.pending.add(question.id)
            reply({"type": "sample",
                   "question": students.question_to_record(question),
                   "teacher_mu": mu, "teacher_sigma": sigma,
                   "model_version": version})
            return True

        if kind == "feedback":
            qid = frame.get("question_id")
            rewards = frame.get("rewards")
            if qid not in session.pending:
                reply({"type": "error", "code": "unknown-question",
                       "reason": f"question id {qid!r} was not served on this connection"})
                return True
            if (not isinstance(rewards, list) or len(rewards) != self.group_size
                    or any(r not in (0, 1) for r in rewards)):
                reply({"type": "error", "code": "bad-rewards",
                       "reason": f"rewards must be a list of {self.group_size} binary values"})
                return True
            with self.coordinator.lock:
                val_mae = self.coordinator.record(qid, rewards)
                version = self.coordinator.model.version
            session.feedback_received += 1
            session.pending.discard(qid)
            reply({"type": "ack", "question_id": qid, "val_mae": val_mae,
                   "model_version": version})
            # refinement runs only after the ack is queued
            with self.coordinator.lock:
                self.coordinator.run_pending_update()
            return True

        if kind == "shutdown":
            reply({"type": "ack"})
            self._stop.set()
            self.stopped.set()
            return False

        reply({"type": "error", "code": "unsupported-type",
               "reason": f"unknown frame type {kind!r}"})
        return True


def serve(model: TeacherModel, dataset: list[Question], address: tuple[str, int],
          cfg: TeacherConfig, *, group_size: int, selection_seed: int,
          update_seed: int) -> TeacherServer:
    """Start a teacher server; returns the running handle."""
    coordinator = GoldilocksCoordinator(model, dataset, cfg,
                                        selection_seed=selection_seed,
                                        update_seed=update_seed)
    server = TeacherServer(coordinator, group_size,
                           host=address[0], port=address[1])
    return server.start()


class ClientConnection:
    """Synchronous request/reply client endpoint.

    ``request_sample`` and ``send_feedback`` have the same signatures as the
    in-process channel, so the training loop cannot tell them apart. With
    ``transcript_path`` set, every frame is recorded verbatim, prefixed by
    its direction (``C>`` sent, ``S>`` received).
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0,
                 transcript_path=None):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(timeout)
        self._line_sock = _LineSocket(sock)
        self._seq = 0
        self._transcript = open(transcript_path, "w", encoding="utf-8") \
            if transcript_path else None

    def close(self) -> None:
        self._line_sock.sock.close()
        if self._transcript:
            self._transcript.close()
            self._transcript = None

    def _send(self, frame: dict) -> None:
        self._seq += 1
        payload = {"v": PROTOCOL_VERSION, **frame, "seq": self._seq}
        data = encode_frame(payload)
        if self._transcript:
            self._transcript.write("C> " + data.decode("utf-8"))
        try:
            self._line_sock.send_line(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _recv(self) -> dict:
        try:
            line = self._line_sock.read_line()
        except socket.timeout as exc:
            raise TransportError("timed out waiting for a reply") from exc
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if line is None:
            raise TransportError("server closed the connection")
        if self._transcript:
            self._transcript.write("S> " + line.decode("utf-8") + "\n")
        frame = json.loads(line)
        if frame.get("type") == "error":
            raise ServerError(frame.get("code", "unknown"), frame.get("reason", ""))
        return frame

    def request_sample(self):
        """Ask for the next question; returns (question, mu, sigma)."""
        self._send({"type": "request_sample"})
        frame = self._recv()
        question = students.question_from_record(frame["question"])
        return question, frame["teacher_mu"], frame["teacher_sigma"]

    def send_feedback(self, question_id: int, rewards_ver) -> float | None:
        self._send({"type": "feedback", "question_id": question_id,
                    "rewards": [int(r) for r in rewards_ver]})
        frame = self._recv()
        return frame["val_mae"]

    def shutdown_server(self) -> None:
        self._send({"type": "shutdown"})
        self._recv()


def client_step(conn: ClientConnection, student, reward_cfg, step: int, *,
                group_size: int, seed: int):
    """One full sample/rollout/feedback cycle; returns the rollout group."""
    question, _mu, _sigma = conn.request_sample()
    group, _sampled = student.rollout(question, group_size, step, reward_cfg, seed)
    conn.send_feedback(question.id, [int(r) for r in group.rewards_ver])
    return group
