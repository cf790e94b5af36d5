"""Failure detection and the per-process helper task.

One-sided calls cannot be trusted to report a dead peer (in real-osc fidelity
they just stop), but two-sided control sends can.  So every risky one-sided
call is preceded by a ping over the control channel, and every process runs a
helper task that drains its control mailbox: answering pings costs nothing
(delivery itself is the liveness proof), and the helper doubles as the
executor for requests that need the target's cooperation (memory enlargement,
transaction log replication).

The residual race is documented and kept: a peer can die between the ping and
the one-sided call that follows it, in which case real-osc fidelity still
produces a SimulatedHang.
"""

from __future__ import annotations

from typing import Callable, Optional

from . import transport as tp


class Detector:
    def __init__(self, tr: tp.Transport, rank: int, enabled: bool = True):
        self.tr = tr
        self.rank = rank
        self.enabled = enabled
        self.suspected: set = set()
        # kind -> handler(msg); store and txn manager plug theirs in
        self.handlers: dict[str, Callable] = {}

    # -- ping ------------------------------------------------------------

    def ping(self, target: int) -> bool:
        """True when the target acknowledged delivery; False marks it suspect."""
        res = self.tr.ping(target)
        if res.ok:
            return True
        self.suspected.add(target)
        return False

    def guard(self, target: int) -> Optional[tp.TransportResult]:
        """Pre-flight for a one-sided call: returns the failure result if the
        ping says the target is gone, None when it is safe(ish) to proceed."""
        if not self.enabled:
            return None
        if self.ping(target):
            return None
        return tp.TransportResult(tp.PROC_FAILED, failed_rank=target)

    # -- helper task --------------------------------------------------------

    def dispatch(self, msg: tp.CtlMessage) -> bool:
        """Handle one control message; False when it was a shutdown."""
        if msg.kind == tp.SHUTDOWN:
            return False
        if msg.kind == tp.PING:
            return True
        handler = self.handlers.get(msg.kind)
        if handler is not None:
            handler(msg)
        return True

    def helper_step(self) -> int:
        """Drain and handle every currently queued helper message; the number
        handled is returned (ticks once per poll)."""
        handled = 0
        while True:
            msg = self.tr.ctl_poll("helper")
            if msg is None:
                return handled
            self.dispatch(msg)
            handled += 1

    def helper_loop(self):
        """Body of the helper task: sleep on the mailbox, handle, repeat."""
        while True:
            msg = self.tr.ctl_wait("helper")
            if not self.dispatch(msg):
                return
