"""Runtime horizontal scaling between full scheduling rounds."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

from .domain import InstanceConfig

log = logging.getLogger(__name__)

HOLD = "hold"
SCALE_UP = "scale_up"
SCALE_DOWN = "scale_down"


@dataclass(frozen=True)
class ScalerPolicy:
    surge_threshold: float = 0.3
    dip_threshold: float = 0.2
    cooldown: float = 30_000.0
    tick: float = 5_000.0

    def __post_init__(self):
        if not 0 < self.dip_threshold < 1:
            raise ValueError("dip_threshold must be in (0, 1)")
        if not (self.cooldown >= self.tick > 0):
            raise ValueError("need cooldown >= tick > 0")
        if self.surge_threshold < 0:
            raise ValueError("surge_threshold must be >= 0")


@dataclass(frozen=True)
class InstanceRuntime:
    key: tuple
    utilization: float
    low_since: float | None  # when utilization last dropped below the dip threshold
    clone: bool = False
    busy: bool = False


@dataclass(frozen=True)
class ModelRuntimeStats:
    pipeline_id: str
    model_id: str
    now: float
    window: float  # ms of history covered
    arrival_rate: float  # queries/s over the last tick
    capacity: float  # queries/s of the placed replicas
    instances: tuple[InstanceRuntime, ...]
    blocked_until: float = -1.0


@dataclass(frozen=True)
class ScaleAction:
    kind: str
    pipeline_id: str
    model_id: str
    instance_key: tuple | None = None


def evaluate(stats: ModelRuntimeStats, policy: ScalerPolicy) -> ScaleAction:
    """At most one action for the model this tick."""
    hold = ScaleAction(HOLD, stats.pipeline_id, stats.model_id)
    if stats.window < policy.tick or stats.now < stats.blocked_until:
        return hold
    if stats.arrival_rate > stats.capacity * (1.0 + policy.surge_threshold):
        return ScaleAction(SCALE_UP, stats.pipeline_id, stats.model_id)
    idle = [
        r
        for r in stats.instances
        if r.clone
        and not r.busy
        and r.low_since is not None
        and stats.now - r.low_since >= policy.cooldown
    ]
    if idle:
        victim = min(idle, key=lambda r: (r.utilization, r.key))
        return ScaleAction(SCALE_DOWN, stats.pipeline_id, stats.model_id, victim.key)
    return hold


class Placer(Protocol):
    def place_clone(self, template: InstanceConfig, instance_number: int) -> InstanceConfig | None: ...

    def remove(self, key: tuple) -> None: ...


def apply(action: ScaleAction, placer: Placer, instances: Sequence[InstanceConfig]) -> InstanceConfig | tuple | None:
    """Carry out ``action``; returns the new config, the removed key, or None.

    A clone that finds no room is dropped and logged.
    """
    if action.kind == SCALE_UP:
        if not instances:
            return None
        template = min(instances, key=lambda r: r.instance_number)
        number = max(r.instance_number for r in instances) + 1
        new = placer.place_clone(template, number)
        if new is None:
            log.info("scale_up %s/%s dropped: no free portion", action.pipeline_id, action.model_id)
        return new
    if action.kind == SCALE_DOWN:
        placer.remove(action.instance_key)
        return action.instance_key
    return None
