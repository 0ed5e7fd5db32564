"""Minimal behavior-tree executor: sequences, fallbacks, condition/action
leaves, and the three decorators the feeding trees need (retry, timeout,
force-gate override). One execution is active at a time; preemption resolves
to a terminal failure within a single tick.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional


class NodeStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class UnboundAction(KeyError):
    """An Action names a binding missing from the registry (config error)."""


class AlreadyTerminal(RuntimeError):
    pass


_node_counter = itertools.count()


class Node:
    kind = "node"

    def __init__(self, name: str):
        self.name = name
        self.node_id = f"{self.kind}:{name}#{next(_node_counter)}"

    def tick(self, ctx, execution) -> NodeStatus:
        raise NotImplementedError

    def reset(self):
        pass

    def cancel(self, ctx):
        pass

    def children(self) -> list:
        return []

    def describe(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        kids = [c.describe() for c in self.children()]
        if kids:
            d["children"] = kids
        return d


class Sequence(Node):
    """Ticks children in order, failing or running fast; resumes from the
    running child on the next tick."""
    kind = "sequence"

    def __init__(self, name: str, children: list):
        super().__init__(name)
        self._children = children
        self._index = 0

    def children(self):
        return self._children

    def reset(self):
        self._index = 0
        for c in self._children:
            c.reset()

    def cancel(self, ctx):
        if self._index < len(self._children):
            self._children[self._index].cancel(ctx)

    def tick(self, ctx, execution) -> NodeStatus:
        while self._index < len(self._children):
            child = self._children[self._index]
            execution.path.append(child.node_id)
            status = child.tick(ctx, execution)
            if status == NodeStatus.RUNNING:
                return NodeStatus.RUNNING
            if status == NodeStatus.FAILURE:
                self._index = 0
                return NodeStatus.FAILURE
            self._index += 1
        self._index = 0
        return NodeStatus.SUCCESS


class Fallback(Node):
    """Succeeds fast: first succeeding child wins; fails only if all fail."""
    kind = "fallback"

    def __init__(self, name: str, children: list):
        super().__init__(name)
        self._children = children
        self._index = 0

    def children(self):
        return self._children

    def reset(self):
        self._index = 0
        for c in self._children:
            c.reset()

    def cancel(self, ctx):
        if self._index < len(self._children):
            self._children[self._index].cancel(ctx)

    def tick(self, ctx, execution) -> NodeStatus:
        while self._index < len(self._children):
            child = self._children[self._index]
            execution.path.append(child.node_id)
            status = child.tick(ctx, execution)
            if status == NodeStatus.RUNNING:
                return NodeStatus.RUNNING
            if status == NodeStatus.SUCCESS:
                self._index = 0
                return NodeStatus.SUCCESS
            self._index += 1
        self._index = 0
        return NodeStatus.FAILURE


class Condition(Node):
    kind = "condition"

    def __init__(self, name: str, predicate: Callable):
        super().__init__(name)
        self.predicate = predicate

    def tick(self, ctx, execution) -> NodeStatus:
        return NodeStatus.SUCCESS if self.predicate(ctx, execution) else NodeStatus.FAILURE


class Action(Node):
    """Leaf bound to a registered operation. The binding object provides
    start/step/cancel against the runtime context."""
    kind = "action"

    def __init__(self, name: str, binding_name: str, registry: dict, params: Optional[dict] = None):
        super().__init__(name)
        if binding_name not in registry:
            raise UnboundAction(binding_name)
        self.binding_name = binding_name
        self.factory = registry[binding_name]
        self.params = params or {}
        self._active = None

    def reset(self):
        self._active = None

    def cancel(self, ctx):
        if self._active is not None:
            self._active.cancel(ctx)
            self._active = None

    def tick(self, ctx, execution) -> NodeStatus:
        if self._active is None:
            self._active = self.factory()
            self._active.start(ctx, execution, self.params)
        status = self._active.step(ctx, execution)
        if status != NodeStatus.RUNNING:
            self._active = None
        return status


class Retry(Node):
    kind = "retry"

    def __init__(self, name: str, child: Node, attempts: int):
        super().__init__(name)
        self.child = child
        self.attempts = attempts
        self._used = 0

    def children(self):
        return [self.child]

    def reset(self):
        self._used = 0
        self.child.reset()

    def cancel(self, ctx):
        self.child.cancel(ctx)

    def tick(self, ctx, execution) -> NodeStatus:
        execution.path.append(self.child.node_id)
        status = self.child.tick(ctx, execution)
        if status == NodeStatus.FAILURE:
            self._used += 1
            if self._used < self.attempts:
                self.child.reset()
                return NodeStatus.RUNNING
            self._used = 0
            return NodeStatus.FAILURE
        if status == NodeStatus.SUCCESS:
            self._used = 0
        return status


class Timeout(Node):
    """Fails the child when its cumulative running time exceeds the budget.
    Time comes from the context clock (simulation seconds)."""
    kind = "timeout"

    def __init__(self, name: str, child: Node, seconds: float):
        super().__init__(name)
        self.child = child
        self.seconds = seconds
        self._started = None

    def children(self):
        return [self.child]

    def reset(self):
        self._started = None
        self.child.reset()

    def cancel(self, ctx):
        self.child.cancel(ctx)

    def tick(self, ctx, execution) -> NodeStatus:
        now = ctx.now()
        if self._started is None:
            self._started = now
        if now - self._started > self.seconds:
            self.child.cancel(ctx)
            self.child.reset()
            self._started = None
            execution.failure_reason = execution.failure_reason or "timeout"
            return NodeStatus.FAILURE
        execution.path.append(self.child.node_id)
        status = self.child.tick(ctx, execution)
        if status != NodeStatus.RUNNING:
            self._started = None
        return status


class GateOverride(Node):
    """Applies a force-gate override to everything beneath it for the duration
    of the subtree's activity."""
    kind = "gate_override"

    def __init__(self, name: str, child: Node, f_max: float, tau_max: float):
        super().__init__(name)
        self.child = child
        self.f_max = f_max
        self.tau_max = tau_max

    def children(self):
        return [self.child]

    def reset(self):
        self.child.reset()

    def cancel(self, ctx):
        self.child.cancel(ctx)

    def tick(self, ctx, execution) -> NodeStatus:
        previous = execution.blackboard.get("gate_override")
        execution.blackboard["gate_override"] = (self.f_max, self.tau_max)
        execution.path.append(self.child.node_id)
        status = self.child.tick(ctx, execution)
        if status != NodeStatus.RUNNING:
            if previous is None:
                execution.blackboard.pop("gate_override", None)
            else:
                execution.blackboard["gate_override"] = previous
        return status


@dataclass
class TreeDefinition:
    name: str
    root: Node
    blackboard_schema: dict = field(default_factory=dict)   # key -> type name

    def __post_init__(self):
        # deterministic ids: position within this tree, not process history
        for i, node in enumerate(self.all_nodes()):
            node.node_id = f"{node.kind}:{node.name}@{i}"

    def describe(self) -> dict:
        return {"name": self.name, "schema": self.blackboard_schema,
                "root": self.root.describe()}

    def all_nodes(self) -> list:
        out = []
        stack = [self.root]
        seen = set()
        while stack:
            n = stack.pop()
            if id(n) in seen:
                raise ValueError("tree must be acyclic")
            seen.add(id(n))
            out.append(n)
            stack.extend(n.children())
        return out


class TreeExecution:
    """One run of one tree. Preemption resolves to Failure("preempted") on the
    tick after the request, after cancelling the active action."""

    def __init__(self, tree: TreeDefinition, blackboard: Optional[dict] = None):
        self.tree = tree
        self.blackboard = dict(blackboard or {})
        self.status = NodeStatus.RUNNING
        self.failure_reason: Optional[str] = None
        self.preempt_requested = False
        self.path: list = []
        self.ticks = 0
        tree.root.reset()

    def terminal(self) -> bool:
        return self.status != NodeStatus.RUNNING

    def preempt(self):
        if self.terminal():
            raise AlreadyTerminal(f"execution already {self.status.value}")
        self.preempt_requested = True

    def tick(self, ctx) -> NodeStatus:
        if self.terminal():
            return self.status
        self.ticks += 1
        if self.preempt_requested:
            self.tree.root.cancel(ctx)
            self.status = NodeStatus.FAILURE
            self.failure_reason = "preempted"
            return self.status
        self.path = [self.tree.root.node_id]
        status = self.tree.root.tick(ctx, self)
        self.status = status
        if status == NodeStatus.FAILURE and self.failure_reason is None:
            self.failure_reason = self.blackboard.get("failure_reason", "failed")
        return status


def tick_tree(execution: TreeExecution, ctx, dt: float = None) -> NodeStatus:
    return execution.tick(ctx)
