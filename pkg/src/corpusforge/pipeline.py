"""Producer-consumer tokenization of an indexed JSONL corpus into a packed file.

Topology: one reader thread streams documents in index order and groups
them into batches; W worker processes tokenize batches in parallel; the
writer (in the calling thread) restores batch order with a seq_no reorder
buffer and appends to the packed file. Both queues are bounded, so the
reader backpressures instead of buffering the corpus.

Workers are processes rather than threads: tokenization is pure CPU work
and must scale with W. Order restoration in the writer makes the output
file byte-identical for any worker count.
"""

from __future__ import annotations

import enum
import json
import multiprocessing as mp
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from queue import Empty, Full

import numpy as np

from .corpus_index import DocumentIndex, verify_index
from .packed_data import _DTYPES, PackedWriter, token_width_for_vocab
from .tokenizers import Tokenizer


class PipelineError(Exception):
    """A pipeline stage failed; the packed output is not usable."""


class StaleIndexError(PipelineError):
    """The raw file changed size since its index was built."""


class ReorderOverflowError(PipelineError):
    """The writer's reorder buffer exceeded its hard cap (pathological stall)."""


class Skip(enum.Enum):
    """Why a document was dropped; skipped documents never abort the run."""

    MALFORMED = "malformed"
    MISSING_TEXT = "missing_text"


def extract_text(raw: bytes, text_key: str = "text") -> str | Skip:
    """Pull the text field out of one raw JSONL document.

    Returns Skip.MALFORMED when the bytes are not a JSON object and
    Skip.MISSING_TEXT when the key is absent or not a string.
    """
    try:
        obj = json.loads(raw)
    except ValueError:
        return Skip.MALFORMED
    if not isinstance(obj, dict):
        return Skip.MALFORMED
    value = obj.get(text_key)
    if not isinstance(value, str):
        return Skip.MISSING_TEXT
    return value


def default_workers() -> int:
    """Logical CPUs minus two, reserving the reader and writer stages."""
    return max(1, (os.cpu_count() or 1) - 2)


@dataclass
class PipelineConfig:
    out_path: str
    workers: int = field(default_factory=default_workers)
    batch_size: int = 128
    queue_capacity: int = 8
    append_eod: bool = True
    text_key: str = "text"
    # Hard cap on out-of-order batches held by the writer. None resolves to
    # max(4 * queue_capacity, workers + 2 * queue_capacity): every in-flight
    # batch (queued on either side or in a worker's hands) must fit, or a
    # stalled worker could abort a healthy run.
    reorder_cap: int | None = None

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.queue_capacity < 1:
            raise ValueError(f"queue_capacity must be >= 1, got {self.queue_capacity}")

    def resolved_reorder_cap(self) -> int:
        if self.reorder_cap is not None:
            return self.reorder_cap
        return max(4 * self.queue_capacity, self.workers + 2 * self.queue_capacity)


@dataclass
class RawBatch:
    seq_no: int
    docs: list[tuple[int, bytes]]


@dataclass
class TokenBatch:
    seq_no: int
    docs: list[tuple[int, np.ndarray]]
    skipped: int = 0
    malformed: int = 0


@dataclass
class PipelineStats:
    documents: int
    skipped: int
    malformed: int
    tokens: int
    elapsed: float
    throughput: float
    reader_busy: float
    reader_idle: float
    worker_busy: float
    worker_idle: float
    writer_busy: float
    writer_idle: float
    work_queue_high_water: int
    output_queue_high_water: int
    reorder_high_water: int
    in_flight_docs_high_water: int

    def summary(self) -> dict:
        return {
            "documents": self.documents,
            "skipped": self.skipped,
            "malformed": self.malformed,
            "tokens": self.tokens,
            "seconds": round(self.elapsed, 3),
            "tokens_per_sec": round(self.throughput, 1),
        }


# Writer-side message tags: ("batch", TokenBatch), one ("done", busy, idle)
# per worker, or ("error", formatted traceback). Workers receive RawBatch
# objects and a single None as their shutdown signal.
_BATCH = "batch"
_DONE = "done"
_ERROR = "error"


def _tokenize_batch(
    batch: RawBatch,
    tokenizer: Tokenizer,
    text_key: str,
    append_eod: bool,
    dtype: np.dtype,
) -> TokenBatch:
    docs: list[tuple[int, np.ndarray]] = []
    skipped = 0
    malformed = 0
    for ordinal, raw in batch.docs:
        text = extract_text(raw, text_key)
        if isinstance(text, Skip):
            skipped += 1
            if text is Skip.MALFORMED:
                malformed += 1
            continue
        ids = tokenizer.encode(text)
        if not ids:
            skipped += 1
            continue
        if append_eod:
            ids.append(tokenizer.eod_token_id)
        docs.append((ordinal, np.asarray(ids, dtype=dtype)))
    return TokenBatch(batch.seq_no, docs, skipped=skipped, malformed=malformed)


def _worker_loop(work_q, out_q, tokenizer, text_key, append_eod, width, counters):
    work_taken, out_pushed = counters
    busy = 0.0
    idle = 0.0
    dtype = _DTYPES[width]
    try:
        while True:
            t0 = time.perf_counter()
            msg = work_q.get()
            t1 = time.perf_counter()
            idle += t1 - t0
            if msg is None:
                break
            with work_taken.get_lock():
                work_taken.value += 1
            result = _tokenize_batch(msg, tokenizer, text_key, append_eod, dtype)
            busy += time.perf_counter() - t1
            with out_pushed.get_lock():
                out_pushed.value += 1
            out_q.put((_BATCH, result))
    except Exception:
        out_q.put((_ERROR, traceback.format_exc()))
    finally:
        out_q.put((_DONE, busy, idle))


class _Reader:
    """Streams documents in index order into the work queue from a thread."""

    def __init__(self, raw_path, index: DocumentIndex, cfg: PipelineConfig, work_q, abort):
        self.raw_path = raw_path
        self.index = index
        self.cfg = cfg
        self.work_q = work_q
        self.abort = abort
        self.busy = 0.0
        self.idle = 0.0
        self.batches = 0
        self.docs_pushed = 0
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._run, name="corpusforge-reader")

    def _put(self, item) -> None:
        # Timed put so an abort can unstick a reader blocked on a full queue.
        t0 = time.perf_counter()
        while not self.abort.is_set():
            try:
                self.work_q.put(item, timeout=0.1)
                break
            except Full:
                continue
        self.idle += time.perf_counter() - t0

    def _run(self) -> None:
        cfg = self.cfg
        try:
            batch: list[tuple[int, bytes]] = []
            t_busy = time.perf_counter()
            with open(self.raw_path, "rb") as f:
                for ordinal in range(self.index.doc_count):
                    offset, length = self.index.spans[ordinal]
                    f.seek(int(offset))
                    batch.append((ordinal, f.read(int(length))))
                    if len(batch) >= cfg.batch_size:
                        self.busy += time.perf_counter() - t_busy
                        self._put(RawBatch(self.batches, batch))
                        self.batches += 1
                        self.docs_pushed += len(batch)
                        batch = []
                        t_busy = time.perf_counter()
            self.busy += time.perf_counter() - t_busy
            if batch:
                self._put(RawBatch(self.batches, batch))
                self.batches += 1
                self.docs_pushed += len(batch)
        except BaseException as exc:
            self.error = exc
        finally:
            for _ in range(cfg.workers):
                self._put(None)


def run_pipeline(
    raw_path: str | os.PathLike,
    index: DocumentIndex,
    tokenizer: Tokenizer,
    cfg: PipelineConfig,
) -> PipelineStats:
    """Tokenize every indexed document into ``cfg.out_path``.

    The output file is byte-identical for any ``cfg.workers`` >= 1 given the
    same inputs and config. Malformed documents are dropped and counted,
    never fatal.
    """
    if not verify_index(index, raw_path):
        raise StaleIndexError(f"{raw_path}: size changed since indexing; rebuild the index")
    if cfg.append_eod and tokenizer.eod_token_id is None:
        raise ValueError("append_eod is enabled but the tokenizer has no eod_token_id")
    width = token_width_for_vocab(tokenizer.vocab_size)
    reorder_cap = cfg.resolved_reorder_cap()

    work_q: mp.Queue = mp.Queue(maxsize=cfg.queue_capacity)
    out_q: mp.Queue = mp.Queue(maxsize=cfg.queue_capacity)
    work_taken = mp.Value("q", 0)
    out_pushed = mp.Value("q", 0)
    abort = threading.Event()

    # Fork workers before the reader thread starts so no other thread of this
    # process is running at fork time.
    workers = [
        mp.Process(
            target=_worker_loop,
            args=(
                work_q,
                out_q,
                tokenizer,
                cfg.text_key,
                cfg.append_eod,
                width,
                (work_taken, out_pushed),
            ),
            daemon=True,
        )
        for _ in range(cfg.workers)
    ]
    for w in workers:
        w.start()

    reader = _Reader(raw_path, index, cfg, work_q, abort)
    started = time.perf_counter()
    reader.thread.start()

    writer = PackedWriter(cfg.out_path, width)
    reorder: dict[int, TokenBatch] = {}
    next_seq = 0
    docs_done = 0
    skipped = 0
    malformed = 0
    worker_busy = 0.0
    worker_idle = 0.0
    writer_busy = 0.0
    writer_idle = 0.0
    done_workers = 0
    out_batches_popped = 0
    work_hw = 0
    out_hw = 0
    reorder_hw = 0
    in_flight_hw = 0
    worker_error: str | None = None

    try:
        while done_workers < cfg.workers:
            t0 = time.perf_counter()
            try:
                msg = out_q.get(timeout=0.5)
            except Empty:
                writer_idle += time.perf_counter() - t0
                if not any(w.is_alive() for w in workers):
                    raise PipelineError("all workers exited without a done signal")
                continue
            writer_idle += time.perf_counter() - t0

            if msg[0] == _DONE:
                done_workers += 1
                worker_busy += msg[1]
                worker_idle += msg[2]
                continue
            if msg[0] == _ERROR:
                worker_error = msg[1]
                break

            t1 = time.perf_counter()
            batch: TokenBatch = msg[1]
            out_batches_popped += 1
            reorder[batch.seq_no] = batch
            reorder_hw = max(reorder_hw, len(reorder))
            if len(reorder) > reorder_cap:
                raise ReorderOverflowError(
                    f"reorder buffer exceeded {reorder_cap} batches while waiting "
                    f"for batch {next_seq}"
                )
            while next_seq in reorder:
                ready = reorder.pop(next_seq)
                for _, ids in ready.docs:
                    writer.write_document(ids)
                docs_done += len(ready.docs) + ready.skipped
                skipped += ready.skipped
                malformed += ready.malformed
                next_seq += 1
            writer_busy += time.perf_counter() - t1

            work_hw = max(work_hw, reader.batches - work_taken.value)
            out_hw = max(out_hw, out_pushed.value - out_batches_popped)
            in_flight_hw = max(in_flight_hw, reader.docs_pushed - docs_done)

        if worker_error is not None:
            raise PipelineError(f"worker failed:\n{worker_error}")

        reader.thread.join()
        if reader.error is not None:
            raise PipelineError(f"reader failed: {reader.error}") from reader.error
        if reorder or next_seq != reader.batches:
            raise PipelineError(
                f"writer finished with {len(reorder)} unplaced batches "
                f"({next_seq}/{reader.batches} written)"
            )
        writer.close()
    except BaseException:
        abort.set()
        for w in workers:
            if w.is_alive():
                w.terminate()
        raise
    finally:
        abort.set()
        reader.thread.join(timeout=5)
        for w in workers:
            w.join(timeout=5)
        work_q.close()
        out_q.close()

    elapsed = time.perf_counter() - started
    tokens = writer.token_count
    return PipelineStats(
        documents=docs_done,
        skipped=skipped,
        malformed=malformed,
        tokens=tokens,
        elapsed=elapsed,
        throughput=tokens / elapsed if elapsed > 0 else 0.0,
        reader_busy=reader.busy,
        reader_idle=reader.idle,
        worker_busy=worker_busy,
        worker_idle=worker_idle,
        writer_busy=writer_busy,
        writer_idle=writer_idle,
        work_queue_high_water=work_hw,
        output_queue_high_water=out_hw,
        reorder_high_water=reorder_hw,
        in_flight_docs_high_water=in_flight_hw,
    )
