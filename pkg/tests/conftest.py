"""Shared helpers: spin up a simulated world and run one program per rank."""

from rmastore.detector import Detector
from rmastore.harness import idle_member  # noqa: F401  (re-export for tests)
from rmastore.sim import Scheduler
from rmastore.store import Store, StoreConfig
from rmastore.transport import Transport


def run_ranks(n, program, fidelity="spec", seed=0, trace=None, kills=(),
              max_steps=2_000_000):
    """Run program(rank, tr, sched) on every rank; returns (results, tr, sched).

    kills: iterable of (rank, at_step) applied via the failure injector.
    """
    sched = Scheduler(seed=seed, max_steps=max_steps)
    tr = Transport(sched, n, fidelity=fidelity, trace=trace)
    for rank, at in kills:
        sched.schedule_kill(rank, at)
    results = {}
    for r in range(n):
        def make(rank=r):
            def main():
                results[rank] = program(rank, tr, sched)
            return main
        sched.spawn(f"p{r}.main", r, "main", make())
    sched.run()
    return results, tr, sched


def run_stores(n, cfg, program, fidelity="spec", seed=0, trace=None, kills=(),
               max_steps=2_000_000, helpers=True):
    """Like run_ranks but each rank gets an initialized Store (and a helper
    task when requested).  program(rank, store, sched) runs after store.init()
    completed on that rank."""
    sched = Scheduler(seed=seed, max_steps=max_steps)
    tr = Transport(sched, n, fidelity=fidelity, trace=trace)
    for rank, at in kills:
        sched.schedule_kill(rank, at)
    results = {}
    stores = {}
    for r in range(n):
        det = Detector(tr, r, enabled=cfg.ping)
        stores[r] = Store(tr, r, cfg, det)
        if helpers:
            def make_helper(rank=r):
                def helper():
                    stores[rank].detector.helper_loop()
                return helper
            sched.spawn(f"p{r}.helper", r, "helper", make_helper())
        def make_main(rank=r):
            def main():
                stores[rank].init()
                results[rank] = program(rank, stores[rank], sched)
            return main
        sched.spawn(f"p{r}.main", r, "main", make_main())
    sched.run()
    return results, stores, tr, sched
