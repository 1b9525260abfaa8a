"""Shared test utilities."""
from recurbench.memory import MemoryBank
from recurbench.tensor import Tensor


class ReplayBank(MemoryBank):
    """Serves memories recorded at the base parameters, so finite differences see them as constants.

    Backprop treats cached states as constants (stop-gradient); the matching
    finite-difference function must hold them fixed as well.
    """

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.recorded = []
        self.replay = False
        self.calls = 0

    def memory(self, n):
        if self.replay:
            mem, ok = self.recorded[self.calls]
            self.calls += 1
            return (None if mem is None else Tensor(mem)), ok
        mem, ok = super().memory(n)
        self.recorded.append((None if mem is None else mem.data.copy(), ok.copy()))
        return mem, ok
