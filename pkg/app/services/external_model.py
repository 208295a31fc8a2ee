"""
Adapter for externally hosted models speaking newline-delimited JSON over
a child process's standard streams.

Protocol (one request in flight at a time):

    {"op":"schema"}                        -> {"n_features":m,"n_classes":K,"encoding":"onehot"|"ordinal"}
    {"op":"predict","instances":[[...]]}   -> {"probs":[[...],...]}

Row order of ``probs`` must match ``instances``.
"""

import json
import logging
import subprocess
import threading
from collections import deque
from queue import Empty, Queue
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.errors import BackendError, BackendTimeout, ProtocolError

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-6


class ExternalSchema(BaseModel):
    """Handshake answer of an external model."""

    n_features: int = Field(gt=0)
    n_classes: int = Field(ge=2)
    encoding: str = Field(pattern="^(onehot|ordinal)$")


def _plain(value: Any) -> Any:
    """Integral floats are written as integers so lines match the documented form."""
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return int(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def encode_line(message: Dict[str, Any]) -> str:
    return json.dumps(_plain_message(message), separators=(",", ":"))


def _plain_message(message: Dict[str, Any]) -> Dict[str, Any]:
    return {key: _plain(value) for key, value in message.items()}


def validate_probabilities(probs: Any, n_rows: int, n_classes: int) -> np.ndarray:
    """Check a decoded ``probs`` payload against the predict contract."""
    try:
        array = np.asarray(probs, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"probs is not a numeric matrix: {exc}") from exc
    if array.shape != (n_rows, n_classes):
        raise ProtocolError(f"probs has shape {array.shape}, expected ({n_rows}, {n_classes})")
    if not np.isfinite(array).all() or (array < 0).any() or (array > 1).any():
        raise ProtocolError("probabilities must lie in [0, 1]")
    sums = array.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE)
    if len(bad):
        raise ProtocolError(f"probabilities of row {int(bad[0])} sum to {sums[bad[0]]:.6g}, not 1")
    return array


class ExternalModel:
    """Client side of the stdio protocol. Not safe for concurrent use."""

    def __init__(
        self,
        command: Sequence[str],
        timeout: float = 30.0,
        record: bool = False,
    ) -> None:
        """
        Launch the model process.

        Args:
            command: argv of the model process.
            timeout: seconds to wait for each response line.
            record: keep a transcript of every line sent and received.
        """
        if not command:
            raise BackendError("external model command is empty")
        self.command = list(command)
        self.timeout = timeout
        self.transcript: Optional[List[Tuple[str, str]]] = [] if record else None
        self.schema: Optional[ExternalSchema] = None
        self._broken = False
        self._lines: Queue = Queue()
        self._stderr_lines: Deque[str] = deque(maxlen=50)
        self._lock = threading.Lock()

        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"failed to launch external model {self.command}: {exc}") from exc

        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._stderr_reader = threading.Thread(target=self._read_stderr_loop, daemon=True)
        self._reader.start()
        self._stderr_reader.start()
        logger.info("Launched external model: %s", " ".join(self.command))

    def _read_loop(self) -> None:
        for line in self._proc.stdout:
            self._lines.put(line.rstrip("\r\n"))
        self._lines.put(None)

    def _read_stderr_loop(self) -> None:
        for line in self._proc.stderr:
            line = line.strip()
            if line:
                with self._lock:
                    self._stderr_lines.append(line)

    def _stderr_summary(self) -> str:
        with self._lock:
            return " | ".join(self._stderr_lines) or "<no stderr>"

    def _request(self, message: Dict[str, Any]) -> Dict[str, Any]:
        if self._broken:
            raise BackendError("external model connection is unusable after an earlier failure")
        if self._proc.poll() is not None:
            self._broken = True
            raise BackendError(
                f"external model exited ({self._proc.returncode}). stderr: {self._stderr_summary()}"
            )

        line = encode_line(message)
        logger.debug("-> %s", line[:200])
        if self.transcript is not None:
            self.transcript.append((">", line))
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._broken = True
            raise BackendError(f"failed to send request to external model: {exc}") from exc

        try:
            answer = self._lines.get(timeout=self.timeout)
        except Empty:
            self._broken = True
            raise BackendTimeout(
                f"no response from external model within {self.timeout:g} s"
            ) from None
        if answer is None:
            self._broken = True
            raise BackendError(
                f"external model closed its output. stderr: {self._stderr_summary()}"
            )

        logger.debug("<- %s", answer[:200])
        if self.transcript is not None:
            self.transcript.append(("<", answer))
        try:
            decoded = json.loads(answer)
        except json.JSONDecodeError as exc:
            self._broken = True
            raise ProtocolError(f"malformed response line: {answer[:200]!r}") from exc
        if not isinstance(decoded, dict):
            self._broken = True
            raise ProtocolError(f"response is not a JSON object: {answer[:200]!r}")
        return decoded

    def handshake(self) -> ExternalSchema:
        """Ask the model for its input width, class count and encoding."""
        answer = self._request({"op": "schema"})
        try:
            self.schema = ExternalSchema.model_validate(answer)
        except ValidationError as exc:
            self._broken = True
            raise ProtocolError(f"invalid schema response: {exc}") from exc
        logger.info(
            "External model: %d features, %d classes, %s encoding",
            self.schema.n_features,
            self.schema.n_classes,
            self.schema.encoding,
        )
        return self.schema

    @property
    def encoding(self) -> str:
        if self.schema is None:
            raise BackendError("handshake has not been performed")
        return self.schema.encoding

    @property
    def n_classes(self) -> int:
        if self.schema is None:
            raise BackendError("handshake has not been performed")
        return self.schema.n_classes

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Send one batch; rows must already be in the model's encoding."""
        if self.schema is None:
            self.handshake()
        X = np.atleast_2d(X)
        answer = self._request({"op": "predict", "instances": X.tolist()})
        if "probs" not in answer:
            self._broken = True
            raise ProtocolError("response is missing the 'probs' field")
        try:
            return validate_probabilities(answer["probs"], X.shape[0], self.schema.n_classes)
        except ProtocolError:
            self._broken = True
            raise

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> "ExternalModel":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()
