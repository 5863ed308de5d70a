"""The two delegation state machines (delegator side and executor side).

Transition functions are pure table lookups. :func:`conformance_fixture`
exports both tables as JSON for the harness and for other implementations.
"""

from __future__ import annotations

import enum
import json
from importlib import resources
from typing import Iterable

from .protocol import InvalidTransition


class DelegationState(str, enum.Enum):
    CREATED = "created"
    INVITED = "invited"
    ACCEPTED = "accepted"
    STARTED = "started"
    RUNNING = "running"
    COMPLETED = "completed"
    ERROR = "error"
    CANCELLED = "cancelled"
    EXPIRED = "expired"

    @property
    def terminal(self) -> bool:
        return self in DELEGATION_TERMINAL


class DelegationEvent(str, enum.Enum):
    SEND_INVITE = "SEND_INVITE"
    RECV_ACCEPT = "RECV_ACCEPT"
    SEND_START = "SEND_START"
    SETUP_COMPLETE = "SETUP_COMPLETE"
    RECV_DONE = "RECV_DONE"
    SNAPSHOT_RECEIVED = "SNAPSHOT_RECEIVED"
    ERROR = "ERROR"
    CANCEL = "CANCEL"
    EXPIRE = "EXPIRE"


class AssignmentState(str, enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    COMPLETED = "completed"
    ERROR = "error"

    @property
    def terminal(self) -> bool:
        return self in ASSIGNMENT_TERMINAL


class AssignmentEvent(str, enum.Enum):
    RECV_START = "RECV_START"
    TASK_COMPLETE = "TASK_COMPLETE"
    ERROR = "ERROR"
    CANCEL = "CANCEL"


DELEGATION_TERMINAL = frozenset(
    {DelegationState.COMPLETED, DelegationState.ERROR, DelegationState.CANCELLED, DelegationState.EXPIRED}
)
ASSIGNMENT_TERMINAL = frozenset({AssignmentState.COMPLETED, AssignmentState.ERROR})

# EXPIRE deliberately excludes `started`: a lease that runs out during
# provisioning surfaces as ERROR.
EXPIRE_SOURCES = frozenset({DelegationState.INVITED, DelegationState.ACCEPTED, DelegationState.RUNNING})


def _delegation_table() -> dict[tuple[DelegationState, DelegationEvent], DelegationState]:
    S, E = DelegationState, DelegationEvent
    table = {
        (S.CREATED, E.SEND_INVITE): S.INVITED,
        (S.INVITED, E.RECV_ACCEPT): S.ACCEPTED,
        (S.ACCEPTED, E.SEND_START): S.STARTED,
        (S.STARTED, E.SETUP_COMPLETE): S.RUNNING,
        (S.RUNNING, E.RECV_DONE): S.COMPLETED,
        (S.RUNNING, E.SNAPSHOT_RECEIVED): S.RUNNING,
    }
    for state in S:
        if state.terminal:
            continue
        table[(state, E.ERROR)] = S.ERROR
        table[(state, E.CANCEL)] = S.CANCELLED
        if state in EXPIRE_SOURCES:
            table[(state, E.EXPIRE)] = S.EXPIRED
    return table


def _assignment_table() -> dict[tuple[AssignmentState, AssignmentEvent], AssignmentState]:
    S, E = AssignmentState, AssignmentEvent
    table = {
        (S.PENDING, E.RECV_START): S.ACTIVE,
        (S.ACTIVE, E.TASK_COMPLETE): S.COMPLETED,
    }
    for state in (S.PENDING, S.ACTIVE):
        table[(state, E.ERROR)] = S.ERROR
        table[(state, E.CANCEL)] = S.ERROR
    return table


DELEGATION_TRANSITIONS = _delegation_table()
ASSIGNMENT_TRANSITIONS = _assignment_table()


def delegation_transition(state: DelegationState | str, event: DelegationEvent | str) -> DelegationState:
    state, event = DelegationState(state), DelegationEvent(event)
    try:
        return DELEGATION_TRANSITIONS[(state, event)]
    except KeyError:
        raise InvalidTransition(f"delegation: {event.value} is not legal in state {state.value}") from None


def assignment_transition(state: AssignmentState | str, event: AssignmentEvent | str) -> AssignmentState:
    state, event = AssignmentState(state), AssignmentEvent(event)
    try:
        return ASSIGNMENT_TRANSITIONS[(state, event)]
    except KeyError:
        raise InvalidTransition(f"assignment: {event.value} is not legal in state {state.value}") from None


def legal_events(state: DelegationState | AssignmentState) -> frozenset:
    if isinstance(state, DelegationState):
        table = DELEGATION_TRANSITIONS
    elif isinstance(state, AssignmentState):
        table = ASSIGNMENT_TRANSITIONS
    else:
        raise TypeError(f"not a lifecycle state: {state!r}")
    return frozenset(ev for (s, ev) in table if s == state)


def fold_delegation(events: Iterable[DelegationEvent | str]) -> DelegationState:
    state = DelegationState.CREATED
    for ev in events:
        state = delegation_transition(state, ev)
    return state


def fold_assignment(events: Iterable[AssignmentEvent | str]) -> AssignmentState:
    state = AssignmentState.PENDING
    for ev in events:
        state = assignment_transition(state, ev)
    return state


def conformance_fixture() -> dict:
    def dump(states, events, terminal, initial, table):
        return {
            "initial": initial.value,
            "states": [s.value for s in states],
            "events": [e.value for e in events],
            "terminal": sorted(s.value for s in terminal),
            "transitions": sorted([s.value, e.value, t.value] for (s, e), t in table.items()),
        }

    return {
        "fixtureVersion": 1,
        "snapshotReceivedSelfLoop": True,
        "delegation": dump(
            DelegationState,
            DelegationEvent,
            DELEGATION_TERMINAL,
            DelegationState.CREATED,
            DELEGATION_TRANSITIONS,
        ),
        "assignment": dump(
            AssignmentState,
            AssignmentEvent,
            ASSIGNMENT_TERMINAL,
            AssignmentState.PENDING,
            ASSIGNMENT_TRANSITIONS,
        ),
    }


def load_conformance_fixture() -> dict:
    """Load the fixture shipped with the package."""
    text = resources.files("awcp").joinpath("conformance.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_conformance_fixture(path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(conformance_fixture(), f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    import sys

    json.dump(conformance_fixture(), sys.stdout, indent=2)
    sys.stdout.write("\n")
