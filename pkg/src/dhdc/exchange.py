"""In-process message exchange and the worker pool for consensus rounds.

All inter-clique data must flow through a :class:`Mailbox` rather than
direct shared-state reads, so a networked backend can replace it later
without touching the solvers.  The pool preserves submission order in its
results, which keeps runs bit-identical regardless of thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


class Mailbox:
    """Tagged point-to-point mailboxes with per-round consumption."""

    def __init__(self):
        self._mail: dict[tuple, dict] = {}

    def send(self, src, dst, tag: str, payload) -> None:
        self._mail.setdefault((dst, tag), {})[src] = payload

    def recv_all(self, dst, tag: str) -> dict:
        """Consume and return {src: payload}, sorted by sender."""
        box = self._mail.pop((dst, tag), {})
        return {k: box[k] for k in sorted(box)}


class WorkerPool:
    """Order-preserving parallel map over independent tasks.

    ``threads=1`` degrades to a plain loop; results always come back in
    input order so reductions are schedule-independent.
    """

    def __init__(self, threads: int | None = None):
        import os

        self.threads = threads if threads and threads > 0 else (os.cpu_count() or 1)
        self._executor = (
            ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        )

    def map(self, fn, items: list) -> list:
        if self._executor is None or len(items) <= 1:
            return [fn(it) for it in items]
        return list(self._executor.map(fn, items))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
