"""A small tick-based behavior-tree engine.

Nodes return a :class:`TickStatus` on every tick. Composite nodes follow the
usual semantics; actions that need several ticks return RUNNING and resume on
the next tick. Every visited node appends a trace record to its tree.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterator, Optional


class TickStatus(str, Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    RUNNING = "RUNNING"


class TreeError(ValueError):
    """Malformed tree, raised at construction time."""


class BlackboardError(KeyError):
    """A key was read before anything wrote it."""


class Blackboard:
    def __init__(self, **initial: Any):
        self._data: dict[str, Any] = dict(initial)

    def __getitem__(self, key: str) -> Any:
        try:
            return self._data[key]
        except KeyError:
            raise BlackboardError(f"blackboard key {key!r} read before being written") from None

    def __setitem__(self, key: str, value: Any) -> None:
        self._data[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def keys(self):
        return self._data.keys()


@dataclass(frozen=True)
class TraceRecord:
    sim_time: float
    node: str
    status: TickStatus


class Node:
    """Base node. Subclasses implement ``update``; ``tick`` adds tracing."""

    max_children: Optional[int] = 0
    min_children: int = 0

    def __init__(self, name: str, children: tuple["Node", ...] = ()):
        if not name:
            raise TreeError("every node needs a name")
        self.name = name
        self.children = list(children)
        self._tree: Optional[BehaviorTree] = None
        n = len(self.children)
        if n < self.min_children or (self.max_children is not None and n > self.max_children):
            raise TreeError(f"{type(self).__name__} {name!r} cannot have {n} children")
        for c in self.children:
            if not isinstance(c, Node):
                raise TreeError(f"child of {name!r} is not a node: {c!r}")

    def tick(self, bb: Blackboard) -> TickStatus:
        status = self.update(bb)
        if not isinstance(status, TickStatus):
            raise TypeError(f"node {self.name!r} returned {status!r}, not a TickStatus")
        if self._tree is not None:
            self._tree.record(self.name, status)
        return status

    def update(self, bb: Blackboard) -> TickStatus:
        raise NotImplementedError

    def reset(self) -> None:
        """Forget progress so the next tick starts fresh."""
        for c in self.children:
            c.reset()

    def walk(self) -> Iterator["Node"]:
        yield self
        for c in self.children:
            yield from c.walk()


class Root(Node):
    min_children = max_children = 1

    def __init__(self, child: Node, name: str = "Root"):
        super().__init__(name, (child,))

    def update(self, bb):
        return self.children[0].tick(bb)


class Sequence(Node):
    """Ticks children left to right and resumes at a RUNNING child on the next tick."""

    min_children = 1
    max_children = None

    def __init__(self, name: str, children):
        super().__init__(name, tuple(children))
        self._current = 0

    def update(self, bb):
        while self._current < len(self.children):
            status = self.children[self._current].tick(bb)
            if status is TickStatus.RUNNING:
                return status
            if status is TickStatus.FAILURE:
                self.reset()
                return status
            self._current += 1
        self.reset()
        return TickStatus.SUCCESS

    def reset(self):
        self._current = 0
        super().reset()


class Retry(Node):
    """Gives its child up to ``n`` attempts; a failed attempt is retried within the same tick."""

    min_children = max_children = 1

    def __init__(self, name: str, child: Node, n: int):
        super().__init__(name, (child,))
        if int(n) != n or n < 1:
            raise TreeError(f"retry count must be a positive integer, got {n!r}")
        self.n = int(n)
        self.failures = 0

    def update(self, bb):
        child = self.children[0]
        while True:
            status = child.tick(bb)
            if status is TickStatus.RUNNING:
                return status
            if status is TickStatus.SUCCESS:
                self.failures = 0
                return status
            self.failures += 1
            child.reset()
            if self.failures >= self.n:
                self.failures = 0
                return TickStatus.FAILURE

    def reset(self):
        self.failures = 0
        super().reset()


class Inverter(Node):
    min_children = max_children = 1

    def __init__(self, name: str, child: Node):
        super().__init__(name, (child,))

    def update(self, bb):
        status = self.children[0].tick(bb)
        if status is TickStatus.SUCCESS:
            return TickStatus.FAILURE
        if status is TickStatus.FAILURE:
            return TickStatus.SUCCESS
        return status


class Loop(Node):
    """Repeats ``body`` until the ``until`` condition succeeds.

    The condition is checked before each pass of the body. A finished body
    pass, successful or not, starts a new pass on the next tick.
    """

    min_children = max_children = 2

    def __init__(self, name: str, until: Node, body: Node):
        super().__init__(name, (until, body))
        self._in_body = False

    def update(self, bb):
        until, body = self.children
        if not self._in_body:
            if until.tick(bb) is TickStatus.SUCCESS:
                return TickStatus.SUCCESS
            self._in_body = True
        status = body.tick(bb)
        if status is not TickStatus.RUNNING:
            self._in_body = False
            body.reset()
        return TickStatus.RUNNING

    def reset(self):
        self._in_body = False
        super().reset()


class Condition(Node):
    def __init__(self, name: str, predicate: Callable[[Blackboard], bool]):
        super().__init__(name)
        self.predicate = predicate

    def update(self, bb):
        return TickStatus.SUCCESS if self.predicate(bb) else TickStatus.FAILURE


class Action(Node):
    """Leaf that runs one slice of work per tick.

    Either pass ``fn(bb) -> TickStatus`` or subclass and override ``update``.
    """

    def __init__(self, name: str, fn: Optional[Callable[[Blackboard], TickStatus]] = None):
        super().__init__(name)
        self.fn = fn
        self.executions = 0

    def tick(self, bb):
        self.executions += 1
        return super().tick(bb)

    def update(self, bb):
        if self.fn is None:
            raise NotImplementedError(f"action {self.name!r} has no body")
        return self.fn(bb)


class BehaviorTree:
    """Validated tree plus its tick trace."""

    def __init__(self, root: Root, clock: Callable[[], float] = lambda: 0.0):
        if not isinstance(root, Root):
            raise TreeError("a tree must start at a Root node")
        names: set[str] = set()
        for node in root.walk():
            if node.name in names:
                raise TreeError(f"duplicate node name {node.name!r}")
            names.add(node.name)
            if node is not root and isinstance(node, Root):
                raise TreeError("Root may only appear at the top of a tree")
            node._tree = self
        self.root = root
        self.clock = clock
        self.trace: list[TraceRecord] = []
        self.tick_count = 0

    def record(self, node: str, status: TickStatus) -> None:
        self.trace.append(TraceRecord(float(self.clock()), node, status))

    def tick(self, bb: Blackboard) -> TickStatus:
        self.tick_count += 1
        return self.root.tick(bb)

    def node(self, name: str) -> Node:
        for n in self.root.walk():
            if n.name == name:
                return n
        raise KeyError(name)

    def trace_lines(self) -> Iterator[str]:
        for r in self.trace:
            yield f"{r.sim_time:.17g},{r.node},{r.status.value}"
