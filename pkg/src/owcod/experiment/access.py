"""Access accounting: every read of task images goes through here.

Training code only ever receives a :class:`TrainView`; asking for
evaluation images while a training phase is open raises immediately.
"""

from __future__ import annotations

from contextlib import contextmanager

from ..errors import DataError


class LeakageError(DataError):
    pass


class DataAccess:
    def __init__(self, task):
        self._task = task
        self._phase = None
        self.log: list[tuple[str, str, str]] = []   # (phase, split, part)

    @contextmanager
    def phase(self, name: str):
        prev, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = prev

    def _split(self, name):
        for s in self._task.splits():
            if s.name == name:
                return s
        raise DataError(f"no split named {name!r}")

    def train(self, name: str) -> list:
        self.log.append((self._phase or "-", name, "train"))
        return list(self._split(name).train)

    def eval(self, name: str) -> list:
        if self._phase in ("train", "pretrain"):
            raise LeakageError(f"evaluation images of {name!r} requested during {self._phase}")
        self.log.append((self._phase or "-", name, "eval"))
        return list(self._split(name).eval)

    def reads(self, phase: str | None = None, part: str | None = None) -> list:
        return [e for e in self.log if (phase is None or e[0] == phase) and (part is None or e[2] == part)]
