"""Logical machine topology and worker-thread placement.

Locality domains are a software partition of the workers. With
``Pinning.NUMA`` each worker thread is bound to the CPUs of a physical NUMA
node (round-robin over the nodes the kernel exposes); when the platform does
not expose nodes or refuses the affinity call, the grouping stays logical.
"""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .errors import PlanError


class Pinning(str, enum.Enum):
    OS = "os"
    NUMA = "numa"


@dataclass(frozen=True)
class MachineTopology:
    n_nodes: int = 1
    cores_per_node: int = 1
    pinning: Pinning = Pinning.OS

    def __post_init__(self):
        if self.n_nodes < 1 or self.cores_per_node < 1:
            raise PlanError(f"topology needs at least one worker, got {self.n_nodes}x{self.cores_per_node}")
        object.__setattr__(self, "pinning", Pinning(self.pinning))

    @property
    def n_workers(self):
        return self.n_nodes * self.cores_per_node

    def node_of(self, worker):
        return worker // self.cores_per_node

    def workers_of(self, node):
        return tuple(range(node * self.cores_per_node, (node + 1) * self.cores_per_node))

    def echo(self):
        return {"n_nodes": self.n_nodes, "cores_per_node": self.cores_per_node, "pinning": self.pinning.value}


def _parse_cpulist(text):
    cpus = set()
    for part in text.strip().split(","):
        if not part:
            continue
        lo, _, hi = part.partition("-")
        cpus.update(range(int(lo), int(hi or lo) + 1))
    return frozenset(cpus)


@lru_cache(maxsize=1)
def physical_nodes():
    """CPU sets of the NUMA nodes visible to this process (may be empty)."""
    root = Path("/sys/devices/system/node")
    nodes = []
    try:
        for path in sorted(root.glob("node[0-9]*"), key=lambda p: int(p.name[4:])):
            cpus = _parse_cpulist((path / "cpulist").read_text())
            if cpus:
                nodes.append(cpus)
    except OSError:
        return ()
    return tuple(nodes)


def pin_current_thread(topology, worker):
    if topology.pinning is not Pinning.NUMA or not hasattr(os, "sched_setaffinity"):
        return False
    nodes = physical_nodes()
    if not nodes:
        return False
    try:
        os.sched_setaffinity(0, nodes[topology.node_of(worker) % len(nodes)])
    except OSError:
        return False
    return True


def run_workers(topology, fn):
    """Run ``fn(worker)`` on one thread per worker; return results in order.

    All threads are released together by a barrier. The first exception
    raised by any worker is re-raised after every thread has finished.
    """
    n = topology.n_workers
    results = [None] * n
    errors = [None] * n
    gate = threading.Barrier(n)

    def body(w):
        pin_current_thread(topology, w)
        try:
            gate.wait()
            results[w] = fn(w)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[w] = exc

    threads = [threading.Thread(target=body, args=(w,), daemon=True) for w in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results
