"""Quasi-static positive-sequence radial load flow.

Backward/forward sweep on a tree: the backward pass aggregates bus
injection currents into branch currents from the leaves to the root, the
forward pass updates voltages from the root outwards. Loads are
constant-PQ, distributed generators constant-P with a Q setpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

from .components import FeederModel


class InvalidTopology(ValueError):
    """Feeder is not a tree rooted at the declared root bus."""


@dataclass
class FeederSolution:
    """Solved network state in per unit."""

    v: dict[str, complex]  # per-bus voltage, root included
    i_line: dict[tuple[str, str], complex]  # per-line current, from->to
    iterations: int
    converged: bool
    mismatch: float  # max |S balance error| over non-root buses
    slack_injection: complex  # complex power fed in at the root

    def losses(self, feeder: FeederModel) -> complex:
        total = 0j
        for line in feeder.lines:
            i = self.i_line[(line.from_bus, line.to_bus)]
            total += line.z * (abs(i) ** 2)
        return total


def solve_radial(
    feeder: FeederModel,
    tap_ratio: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> FeederSolution:
    """Sweep solver; root voltage is feeder.slack_v_pu * tap_ratio.

    Iterates until both the voltage change and the bus power mismatch drop
    below tol. A run that exhausts max_iter returns the best iterate with
    converged=False instead of raising.
    """
    if not (tol > 0.0):
        raise ValueError("tol must be > 0")
    order, children, line_of, line_z = _validate_tree(feeder)

    v_root = complex(feeder.slack_v_pu * tap_ratio, 0.0)
    v = {b: v_root for b in order}
    v[feeder.root] = v_root

    branch: dict[tuple[str, str], complex] = {}
    iterations = 0
    converged = False
    mismatch = float("inf")
    for iterations in range(1, max_iter + 1):
        # backward: accumulate currents leaf -> root
        inj = {b: (feeder.injection(b) / v[b]).conjugate() for b in order}
        acc = dict(inj)
        for b in reversed(order):
            for child in children.get(b, ()):
                acc[b] += acc[child]
            branch[line_of[b]] = acc[b]
        # forward: update voltages root -> leaf
        dv_max = 0.0
        for b in order:
            line = line_of[b]
            parent = line[0]
            v_new = v[parent] - line_z[line] * branch[line]
            dv_max = max(dv_max, abs(v_new - v[b]))
            v[b] = v_new
        mismatch = _power_mismatch(feeder, v, branch, children, line_of)
        if dv_max < tol and mismatch < tol:
            converged = True
            break

    slack = v_root * sum(
        branch[line_of[b]] for b in children.get(feeder.root, ())
    ).conjugate()
    return FeederSolution(
        v=dict(v),
        i_line=dict(branch),
        iterations=iterations,
        converged=converged,
        mismatch=mismatch,
        slack_injection=slack,
    )


def voltage_extrema(
    solution: FeederSolution, buses: list[str] | None = None
) -> tuple[float, float, float]:
    """(v_min, v_max, spread) of the voltage magnitudes at the monitored
    buses (all non-root buses when not specified)."""
    names = buses if buses is not None else [b for b in solution.v if b != "root"]
    mags = [abs(solution.v[b]) for b in names]
    if not mags:
        raise ValueError("no buses to monitor")
    v_min, v_max = min(mags), max(mags)
    return v_min, v_max, v_max - v_min


def _validate_tree(feeder: FeederModel):
    """Check tree topology; return (topological bus order, children map,
    bus -> incoming line key, line impedance map)."""
    incoming: dict[str, tuple[str, str]] = {}
    children: dict[str, list[str]] = {}
    line_z: dict[tuple[str, str], complex] = {}
    known = {feeder.root, *feeder.buses}
    for line in feeder.lines:
        key = (line.from_bus, line.to_bus)
        if line.to_bus in incoming:
            raise InvalidTopology(f"bus {line.to_bus} has two feeding lines")
        if line.to_bus == feeder.root:
            raise InvalidTopology("a line feeds the root bus")
        if line.from_bus not in known or line.to_bus not in known:
            raise InvalidTopology(f"line {key} references an undeclared bus")
        incoming[line.to_bus] = key
        children.setdefault(line.from_bus, []).append(line.to_bus)
        line_z[key] = line.z

    order: list[str] = []
    seen = {feeder.root}
    frontier = [feeder.root]
    while frontier:
        bus = frontier.pop(0)
        for child in children.get(bus, ()):
            if child in seen:
                raise InvalidTopology(f"bus {child} reachable twice (loop)")
            seen.add(child)
            order.append(child)
            frontier.append(child)
    unreached = set(feeder.buses) - seen
    if unreached:
        raise InvalidTopology(f"buses not connected to the root: {sorted(unreached)}")
    line_of = {b: incoming[b] for b in order}
    return order, children, line_of, line_z


def _power_mismatch(feeder, v, branch, children, line_of) -> float:
    """Max |specified - network| complex power over the non-root buses."""
    worst = 0.0
    for b in line_of:
        i_in = branch[line_of[b]]
        i_out = sum(branch[line_of[c]] for c in children.get(b, ()))
        s_drawn = v[b] * (i_in - i_out).conjugate()
        worst = max(worst, abs(s_drawn - feeder.injection(b)))
    return worst
