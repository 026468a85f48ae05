"""Deterministic execution of hand-written interleavings.

A script is a line-oriented program: `load <table> <key> <value>` lines
(which must come first) seed initial committed state, `step <thread> <op>`
runs one engine operation on the named thread, `barrier` marks a
rendezvous, `tick` advances the engine's epoch. Tables named anywhere in
the script are created before execution. The executor runs each script
thread as a real thread but hands a baton down the script line by line,
so the steps start in exactly the script's order — a total order that
subsumes every barrier — and identical scripts always produce identical
outcomes.

An operation that fails with a transaction abort marks the thread's
current transaction aborted; the thread's remaining operations up to its
next commit/abort/begin are skipped, so a fixed script can express
"this transaction tries to go on and fails". Any operation that blocks
past the deadline fails the run with a state dump instead of hanging.

After the last step the recorded history is checked for serializability
and each committed transaction is assigned its position in the witness
serial order.
"""
from __future__ import annotations

import threading
import time
from typing import Optional

from .core import format_txid
from .engine import Engine, TxAborted
from .oracle import History, check_mvsr

_VALUE_OPS = {"write": 3, "insert": 3, "delete": 2, "read": 2, "scan": 3}
_PLAIN_OPS = {"begin", "commit", "abort"}


class ScriptError(Exception):
    """The script text is malformed or walks an impossible path."""


class ScheduleTimeout(Exception):
    """The protocol blocked mid-schedule; message carries a state dump."""


class Step:
    __slots__ = ("thread", "op", "args", "expect", "line")

    def __init__(self, thread: Optional[int], op: str, args: tuple,
                 expect, line: int) -> None:
        self.thread = thread
        self.op = op
        self.args = args
        self.expect = expect      # (present: bool, value) or None
        self.line = line


def parse_script(text: str) -> list:
    steps = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "load":
            if len(parts) != 4:
                raise ScriptError(
                    f"line {n}: expected `load <table> <key> <value>`")
            if any(s.op != "load" for s in steps):
                raise ScriptError(f"line {n}: load lines must precede steps")
            steps.append(Step(None, "load",
                              (parts[1], parts[2].encode(),
                               parts[3].encode()), None, n))
            continue
        if parts[0] == "barrier":
            if len(parts) != 1:
                raise ScriptError(f"line {n}: barrier takes no arguments")
            steps.append(Step(None, "barrier", (), None, n))
            continue
        if parts[0] == "tick":
            if len(parts) != 1:
                raise ScriptError(f"line {n}: tick takes no arguments")
            steps.append(Step(None, "tick", (), None, n))
            continue
        if parts[0] != "step" or len(parts) < 3:
            raise ScriptError(f"line {n}: expected `step <thread> <op>`")
        try:
            thread = int(parts[1])
        except ValueError:
            raise ScriptError(f"line {n}: bad thread id {parts[1]!r}") \
                from None
        if not 0 <= thread <= 255:
            raise ScriptError(f"line {n}: thread id out of range")
        op, rest = parts[2], parts[3:]
        expect = None
        if "expect" in rest:
            at = rest.index("expect")
            if op != "read" or len(rest) != at + 2:
                raise ScriptError(f"line {n}: bad expect clause")
            want = rest[at + 1]
            expect = (want != "-", want.encode())
            rest = rest[:at]
        if op in _PLAIN_OPS:
            if rest:
                raise ScriptError(f"line {n}: {op} takes no arguments")
            args = ()
        elif op in _VALUE_OPS:
            if len(rest) != _VALUE_OPS[op]:
                raise ScriptError(
                    f"line {n}: {op} takes {_VALUE_OPS[op]} arguments")
            args = (rest[0],) + tuple(a.encode() for a in rest[1:])
        else:
            raise ScriptError(f"line {n}: unknown operation {op!r}")
        steps.append(Step(thread, op, args, expect, n))
    return steps


class TxOutcome:
    __slots__ = ("thread", "txid", "committed", "reason", "position")

    def __init__(self, thread: int, txid: int) -> None:
        self.thread = thread
        self.txid = txid
        self.committed = False
        self.reason: Optional[str] = None
        self.position: Optional[int] = None

    def __repr__(self) -> str:
        state = ("committed@%s" % self.position if self.committed
                 else "aborted(%s)" % self.reason)
        return f"TxOutcome(thread={self.thread}, " \
               f"txid={format_txid(self.txid)}, {state})"


class ScheduleResult:
    __slots__ = ("outcomes", "verdict", "history")

    def __init__(self, outcomes: list, verdict, history) -> None:
        self.outcomes = outcomes
        self.verdict = verdict
        self.history = history

    def by_thread(self, thread: int) -> list:
        return [o for o in self.outcomes if o.thread == thread]


class _Runner:
    def __init__(self, engine: Engine, steps: list, timeout_s: float) -> None:
        self.engine = engine
        self.steps = steps
        self.deadline = time.monotonic() + timeout_s
        self.cond = threading.Condition()
        self.index = 0
        self.failure: Optional[BaseException] = None
        self.outcomes: list = []
        self.txs: dict = {}            # thread -> live tx handle
        self.open: dict = {}           # thread -> its current TxOutcome
        self.dead: set = set()         # threads riding out an abort

    def _advance(self) -> None:
        with self.cond:
            self.index += 1
            self.cond.notify_all()

    def _fail(self, exc: BaseException) -> None:
        with self.cond:
            if self.failure is None:
                self.failure = exc
                self.index = len(self.steps)
            self.cond.notify_all()

    def _await_turn(self, thread: Optional[int]) -> Optional[Step]:
        """Block until the next step belongs to ``thread``; None when done."""
        with self.cond:
            while True:
                if self.failure is not None or self.index >= len(self.steps):
                    return None
                step = self.steps[self.index]
                if step.thread == thread:
                    return step
                remaining = self.deadline - time.monotonic()
                if remaining <= 0 or not self.cond.wait(timeout=remaining):
                    if thread is None and self.failure is None:
                        self.failure = ScheduleTimeout(self._dump(step))
                        self.cond.notify_all()
                    return None

    def _dump(self, step: Step) -> str:
        lines = [f"schedule blocked at line {step.line} "
                 f"(step {self.index + 1}/{len(self.steps)})"]
        for thread, out in sorted(self.open.items()):
            lines.append(f"  thread {thread}: {out!r}")
        dump = getattr(self.engine, "dump_graph", None)
        if dump is not None:
            lines.append(dump())
        return "\n".join(lines)

    def _thread_main(self, thread: int) -> None:
        while True:
            step = self._await_turn(thread)
            if step is None:
                return
            try:
                self._run_step(thread, step)
            except BaseException as exc:
                self._fail(exc)
                return
            self._advance()

    def _run_step(self, thread: int, step: Step) -> None:
        eng, op = self.engine, step.op
        if op == "begin":
            tx = eng.begin(thread)
            self.txs[thread] = tx
            out = TxOutcome(thread, tx.txid)
            self.open[thread] = out
            self.outcomes.append(out)
            self.dead.discard(thread)
            return
        out = self.open.get(thread)
        if out is None:
            raise ScriptError(
                f"line {step.line}: thread {thread} has no open transaction")
        if thread in self.dead:
            if op in ("commit", "abort"):
                self.open.pop(thread)
                self.dead.discard(thread)
            return
        tx = self.txs[thread]
        try:
            if op == "commit":
                eng.commit(tx)
                out.committed = True
                self.open.pop(thread)
            elif op == "abort":
                eng.abort(tx)
                out.reason = "scripted"
                self.open.pop(thread)
            elif op == "read":
                got = eng.read(tx, step.args[0], step.args[1])
                if step.expect is not None:
                    present, want = step.expect
                    ok = (got == want) if present else (got is None)
                    if not ok:
                        raise ScriptError(
                            f"line {step.line}: read returned {got!r}, "
                            f"expected {want!r}" if present else
                            f"line {step.line}: read returned {got!r}, "
                            f"expected absence")
            elif op == "write":
                eng.write(tx, step.args[0], step.args[1], step.args[2])
            elif op == "insert":
                eng.insert(tx, step.args[0], step.args[1], step.args[2])
            elif op == "delete":
                eng.delete(tx, step.args[0], step.args[1])
            elif op == "scan":
                eng.scan(tx, step.args[0], step.args[1], step.args[2])
        except TxAborted as exc:
            out.reason = exc.reason
            if op in ("commit", "abort"):
                self.open.pop(thread)
            else:
                self.dead.add(thread)

    def _coordinator_step(self, step: Step) -> None:
        if step.op == "tick":
            epochs = getattr(self.engine, "epochs", None)
            if epochs is None:
                raise ScriptError(
                    f"line {step.line}: this engine has no epochs to tick")
            epochs.tick()
        # barrier: the baton already serializes every step across it

    def run(self) -> list:
        threads = sorted({s.thread for s in self.steps if s.thread is not None})
        workers = [threading.Thread(target=self._thread_main, args=(t,),
                                    name=f"script-{t}", daemon=True)
                   for t in threads]
        for w in workers:
            w.start()
        while True:
            step = self._await_turn(None)
            if step is None:
                break
            try:
                self._coordinator_step(step)
            except BaseException as exc:
                self._fail(exc)
                break
            self._advance()
        for w in workers:
            w.join(timeout=max(0.0, self.deadline - time.monotonic()) + 1.0)
        if self.failure is not None:
            raise self.failure
        if self.open:
            raise ScriptError(
                "script ended with open transactions on threads "
                + ", ".join(str(t) for t in sorted(self.open)))
        return self.outcomes


def run_scripted_schedule(script, engine: Engine,
                          timeout_s: float = 10.0) -> ScheduleResult:
    """Execute ``script`` (text or parsed steps) against ``engine``.

    Returns every transaction's outcome in begin order; committed ones
    carry their position in the witness serial order of the recorded
    history, which is checked for serializability as part of the run.
    """
    steps = parse_script(script) if isinstance(script, str) else list(script)
    loads = [s for s in steps if s.op == "load"]
    steps = [s for s in steps if s.op != "load"]
    for s in loads + [s for s in steps if s.op in _VALUE_OPS]:
        name = s.args[0]
        if name not in engine.db.tables:
            engine.db.create_table(name)
    for s in loads:
        engine.db.bulk_load(s.args[0], [(s.args[1], s.args[2])])
    if engine.history is None:
        engine.history = History()
    runner = _Runner(engine, steps, timeout_s)
    outcomes = runner.run()
    verdict = check_mvsr(engine.history, mode="graph")
    if verdict.serializable:
        position = {txid: i for i, txid in enumerate(verdict.witness)}
        for out in outcomes:
            if out.committed:
                out.position = position[out.txid]
    return ScheduleResult(outcomes, verdict, engine.history)
