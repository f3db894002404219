"""Mask oracles: "evaluate the model's adjusted target logit under a mask bundle".

Attribution and evaluation only ever talk to an ``Oracle``. Three flavours:
``ModelOracle`` runs the in-process toy model, ``SubprocessOracle`` speaks the
``headflow/1`` NDJSON protocol to an external process, and ``CachedOracle``
memoizes either one.
"""
import hashlib
import json
import math
import subprocess
import threading
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Optional

import numpy as np

from headflow.errors import ConfigError, OracleError, OracleTransportError
from headflow.intervention import InterventionPlan
from headflow.model import adjusted_logit, forward_masks, image_side, replace_masks

PROTOCOL = "headflow/1"


def _as_bits(mask, n, name):
    if mask is None:
        return None
    if isinstance(mask, str):
        if len(mask) != n or set(mask) - {"0", "1"}:
            raise ConfigError(f"{name} must be {n} characters of 0/1")
        return np.frombuffer(mask.encode("ascii"), dtype=np.uint8) == ord("1")
    arr = np.asarray(mask).astype(bool)
    if arr.shape != (n,):
        raise ConfigError(f"{name} has length {arr.size}, expected {n}")
    return arr


def bitstring(mask):
    return "".join("1" if b else "0" for b in mask)


@dataclass(frozen=True, eq=False)
class MaskQuery:
    head_mask: np.ndarray
    text_mask: Optional[np.ndarray] = None
    image_mask: Optional[np.ndarray] = None

    def key(self):
        parts = []
        for m in (self.head_mask, self.text_mask, self.image_mask):
            parts.append(b"*" if m is None else np.packbits(m).tobytes() + bytes([len(m) % 256]))
        return b"|".join(parts)

    def to_wire(self, query_id):
        msg = {"id": int(query_id), "head_mask": bitstring(self.head_mask)}
        if self.text_mask is not None:
            msg["text_mask"] = bitstring(self.text_mask)
        if self.image_mask is not None:
            msg["image_mask"] = bitstring(self.image_mask)
        return json.dumps(msg, separators=(",", ":"))


@dataclass(frozen=True)
class OracleDescriptor:
    n_heads: int
    n_text: int
    n_image: int
    raw_zero: Optional[float] = None
    raw_one: Optional[float] = None


class Oracle:
    n_heads: int
    n_text: int
    n_image: int

    def query(self, head_mask, text_mask=None, image_mask=None):
        """Build a validated ``MaskQuery`` for this oracle's dimensions."""
        return MaskQuery(
            _as_bits(head_mask, self.n_heads, "head_mask"),
            _as_bits(text_mask, self.n_text, "text_mask"),
            _as_bits(image_mask, self.n_image, "image_mask"),
        )

    def check(self, q):
        if q.head_mask.shape != (self.n_heads,):
            raise ConfigError(f"head_mask length {q.head_mask.size} != {self.n_heads}")
        if q.text_mask is not None and q.text_mask.shape != (self.n_text,):
            raise ConfigError(f"text_mask length {q.text_mask.size} != {self.n_text}")
        if q.image_mask is not None and q.image_mask.shape != (self.n_image,):
            raise ConfigError(f"image_mask length {q.image_mask.size} != {self.n_image}")

    @property
    def identity(self):
        raise NotImplementedError

    def evaluate(self, query):
        raise NotImplementedError

    def evaluate_batch(self, queries):
        out = []
        for idx, q in enumerate(queries):
            try:
                out.append(self.evaluate(q))
            except OracleError as exc:
                exc.index = idx
                raise
        return out

    def anchors(self):
        """Raw values for the all-ablated and all-intact head masks."""
        zero, one = self.evaluate_batch(
            [self.query(np.zeros(self.n_heads, bool)), self.query(np.ones(self.n_heads, bool))]
        )
        return zero, one

    def descriptor(self, with_anchors=False):
        raw_zero = raw_one = None
        if with_anchors:
            raw_zero, raw_one = self.anchors()
        return OracleDescriptor(self.n_heads, self.n_text, self.n_image, raw_zero, raw_one)


class ModelOracle(Oracle):
    """In-process oracle: one sequence, one model, one baseline."""

    chunk = 128

    def __init__(self, config, weights, sequence, baseline, workers=1):
        sequence.validate(config)
        baseline.check(config)
        self.config, self.weights, self.sequence, self.baseline = config, weights, sequence, baseline
        self.n_heads = config.n_components
        self.n_text = sequence.n_text
        self.n_image = config.n_image
        self.workers = max(1, int(workers))
        self._identity = None
        self._image = image_side(config, weights, sequence.image_embeddings)

    @property
    def identity(self):
        if self._identity is None:
            h = hashlib.sha256()
            h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
            for arr in self.weights.tensors().values():
                h.update(arr.tobytes())
            h.update(self.sequence.image_embeddings.tobytes())
            h.update(repr((self.sequence.text_tokens, self.sequence.target_token)).encode())
            h.update(self.baseline.k.tobytes())
            h.update(self.baseline.v.tobytes())
            self._identity = h.hexdigest()
        return self._identity

    def plan(self, q):
        return InterventionPlan(
            self.config, self.baseline, q.head_mask, q.text_mask, q.image_mask, n_text=self.n_text
        )

    def evaluate(self, query):
        return self.evaluate_batch([query])[0]

    def _chunk(self, queries):
        n = len(queries)
        heads = np.empty((n, self.n_heads), bool)
        text = np.ones((n, self.n_text), bool)
        image = np.ones((n, self.n_image), bool)
        for i, q in enumerate(queries):
            self.check(q)
            heads[i] = q.head_mask
            if q.text_mask is not None:
                text[i] = q.text_mask
            if q.image_mask is not None:
                image[i] = q.image_mask
        rep = replace_masks(self.config, self.n_text, heads, text, image)
        logits = forward_masks(
            self.config, self.weights, self.sequence, self.baseline, rep, image=self._image
        )
        return [adjusted_logit(row, self.sequence.target_token) for row in logits]

    def evaluate_batch(self, queries):
        queries = list(queries)
        chunks = [queries[i:i + self.chunk] for i in range(0, len(queries), self.chunk)]
        if self.workers == 1 or len(chunks) < 2:
            parts = [self._chunk(c) for c in chunks]
        else:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(self._chunk, chunks))
        return [v for part in parts for v in part]


class LinearOracle(Oracle):
    """Exactly linear black box: ``bias + x.theta + u.theta_text + v.theta_image``.

    Missing text or image masks count as all-ones. Handy as ground truth for
    attribution, curves and token analyses.
    """

    def __init__(self, theta, bias=0.0, theta_text=None, theta_image=None, n_text=1, n_image=1):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.bias = float(bias)
        self.theta_text = np.zeros(n_text) if theta_text is None else np.asarray(theta_text, np.float64)
        self.theta_image = np.zeros(n_image) if theta_image is None else np.asarray(theta_image, np.float64)
        self.n_heads = self.theta.size
        self.n_text = self.theta_text.size
        self.n_image = self.theta_image.size

    @property
    def identity(self):
        h = hashlib.sha256(b"linear")
        for arr in (self.theta, self.theta_text, self.theta_image, np.array([self.bias])):
            h.update(arr.tobytes())
        return h.hexdigest()

    def evaluate(self, query):
        self.check(query)
        value = self.bias + float(query.head_mask @ self.theta)
        value += float(self.theta_text.sum() if query.text_mask is None else query.text_mask @ self.theta_text)
        value += float(
            self.theta_image.sum() if query.image_mask is None else query.image_mask @ self.theta_image
        )
        return value


class CachedOracle(Oracle):
    """Bounded LRU memo in front of another oracle. Never changes values."""

    def __init__(self, inner, capacity=2 ** 20):
        self.inner = inner
        self.n_heads, self.n_text, self.n_image = inner.n_heads, inner.n_text, inner.n_image
        self.capacity = int(capacity)
        self._cache = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def identity(self):
        return self.inner.identity

    def _get(self, key):
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                self.hits += 1
                return self._cache[key]
        return None

    def _put(self, key, value):
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > self.capacity:
                self._cache.popitem(last=False)

    def evaluate(self, query):
        return self.evaluate_batch([query])[0]

    def evaluate_batch(self, queries):
        queries = list(queries)
        ident = self.identity
        keys = [(ident, q.key()) for q in queries]
        out = [self._get(k) for k in keys]
        todo = OrderedDict()
        for idx, (k, v) in enumerate(zip(keys, out)):
            if v is None and k not in todo:
                todo[k] = idx
        if todo:
            with self._lock:
                self.misses += len(todo)
            values = self.inner.evaluate_batch([queries[i] for i in todo.values()])
            fresh = dict(zip(todo, values))
            for k, v in fresh.items():
                self._put(k, v)
            out = [fresh[k] if v is None else v for k, v in zip(keys, out)]
        return out


class SubprocessOracle(Oracle):
    """Client side of the NDJSON protocol, talking to a child process.

    Requests are pipelined; a reader thread matches responses to requests by
    id, so out-of-order replies are fine. No retries unless ``retries > 0``.
    """

    def __init__(self, cmd, timeout=60.0, retries=0, stderr=None):
        self.cmd = list(cmd)
        self.timeout = timeout
        self.retries = int(retries)
        try:
            self.proc = subprocess.Popen(
                self.cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=stderr if stderr is not None else subprocess.DEVNULL,
                bufsize=0,
            )
        except OSError as exc:
            raise OracleTransportError(f"cannot start oracle process {self.cmd}: {exc}") from None
        self._write_lock = threading.Lock()
        self._id_lock = threading.Lock()
        self._next_id = 0
        self._pending = {}
        self._fatal = None
        self._handshake = Future()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        try:
            hello = self._handshake.result(timeout=timeout)
        except FutureTimeout:
            self.close()
            raise OracleTransportError("timed out waiting for handshake") from None
        except OracleTransportError:
            self.close()
            raise
        self.n_heads = hello["n_heads"]
        self.n_text = hello["n_text"]
        self.n_image = hello["n_image"]
        self._ident = hashlib.sha256(
            json.dumps([self.cmd, hello], sort_keys=True).encode()
        ).hexdigest()

    @property
    def identity(self):
        return self._ident

    def _fail_all(self, exc):
        self._fatal = exc
        if not self._handshake.done():
            self._handshake.set_exception(exc)
        for fut in list(self._pending.values()):
            if not fut.done():
                fut.set_exception(exc)
        self._pending.clear()

    def _read_loop(self):
        stream = self.proc.stdout
        for raw in iter(stream.readline, b""):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                self._fail_all(OracleTransportError("response is not UTF-8", raw))
                return
            if not line.endswith("\n"):
                self._fail_all(OracleTransportError("unterminated response line", line))
                return
            line = line[:-1]
            try:
                msg = json.loads(line, parse_constant=_reject_constant)
            except ValueError:
                self._fail_all(OracleTransportError("malformed response", line))
                return
            if not self._handshake.done():
                ok = (
                    isinstance(msg, dict)
                    and msg.get("protocol") == PROTOCOL
                    and all(isinstance(msg.get(k), int) for k in ("n_heads", "n_text", "n_image"))
                )
                if not ok:
                    self._fail_all(OracleTransportError("bad handshake", line))
                    return
                self._handshake.set_result(msg)
                continue
            qid = msg.get("id") if isinstance(msg, dict) else None
            fut = self._pending.pop(qid, None) if isinstance(qid, int) else None
            if fut is None:
                self._fail_all(OracleTransportError("response with unknown id", line))
                return
            if "error" in msg:
                fut.set_exception(OracleError(f"oracle reported error for id {qid}: {msg['error']}"))
            elif isinstance(msg.get("logit"), (int, float)) and not isinstance(msg["logit"], bool) \
                    and math.isfinite(msg["logit"]):
                fut.set_result(float(msg["logit"]))
            else:
                self._fail_all(OracleTransportError("response without finite logit", line))
                return
        code = self.proc.poll()
        self._fail_all(OracleTransportError(f"oracle process exited (status {code})"))

    def _submit(self, query):
        if self._fatal is not None:
            raise self._fatal
        with self._id_lock:
            qid = self._next_id
            self._next_id += 1
        fut = Future()
        self._pending[qid] = fut
        line = (query.to_wire(qid) + "\n").encode("utf-8")
        try:
            with self._write_lock:
                self.proc.stdin.write(line)
                self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self._pending.pop(qid, None)
            raise OracleTransportError("oracle process closed its input") from None
        return fut

    def evaluate(self, query):
        return self.evaluate_batch([query])[0]

    def evaluate_batch(self, queries):
        queries = list(queries)
        for q in queries:
            self.check(q)
        futures = [self._submit(q) for q in queries]
        out = []
        for idx, (q, fut) in enumerate(zip(queries, futures)):
            attempts = self.retries
            while True:
                try:
                    out.append(fut.result(timeout=self.timeout))
                    break
                except FutureTimeout:
                    err = OracleTransportError(f"timed out waiting for query {idx}")
                except OracleError as exc:
                    err = exc
                if attempts <= 0 or self._fatal is not None:
                    err.index = idx
                    raise err
                attempts -= 1
                fut = self._submit(q)
        return out

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _reject_constant(name):
    raise ValueError(f"non-finite JSON constant {name}")


def _dump(obj):
    return json.dumps(obj, separators=(",", ":"))


def serve(oracle, instream, outstream):
    """Answer NDJSON requests from ``instream`` until EOF.

    Streams are binary. Malformed lines get an error response and the loop
    carries on; only EOF ends it.
    """
    def send(obj):
        outstream.write((_dump(obj) + "\n").encode("utf-8"))
        outstream.flush()

    send({"protocol": PROTOCOL, "n_heads": oracle.n_heads, "n_text": oracle.n_text,
          "n_image": oracle.n_image})
    for raw in iter(instream.readline, b""):
        text = raw.decode("utf-8", errors="replace").rstrip("\r\n")
        if not text.strip():
            continue
        qid = None
        try:
            msg = json.loads(text, parse_constant=_reject_constant)
            if not isinstance(msg, dict):
                raise ValueError("request must be a JSON object")
            qid = msg.get("id")
            if not isinstance(qid, int) or isinstance(qid, bool) or qid < 0:
                qid = None
                raise ValueError("request id must be a non-negative integer")
            q = oracle.query(msg.get("head_mask", "1" * oracle.n_heads),
                             msg.get("text_mask"), msg.get("image_mask"))
            send({"id": qid, "logit": float(oracle.evaluate(q))})
        except (ValueError, ConfigError, OracleError) as exc:
            send({"id": qid, "error": str(exc)})


def random_queries(oracle, n, seed, p_intact=0.5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append(MaskQuery(
            rng.random(oracle.n_heads) < p_intact,
            rng.random(oracle.n_text) < p_intact,
            rng.random(oracle.n_image) < p_intact,
        ))
    return out


def verify_roundtrip(local, remote, n=100, seed=0):
    """Compare two oracles on ``n`` random mask bundles, bit for bit.

    Returns ``(n_match, mismatches)`` where mismatches lists
    ``(index, local_value, remote_value)``.
    """
    if (local.n_heads, local.n_text, local.n_image) != (remote.n_heads, remote.n_text, remote.n_image):
        raise ConfigError("oracles disagree on dimensions")
    queries = random_queries(local, n, seed)
    a = local.evaluate_batch(queries)
    b = remote.evaluate_batch(queries)
    bad = [(i, x, y) for i, (x, y) in enumerate(zip(a, b)) if x != y]
    return n - len(bad), bad
