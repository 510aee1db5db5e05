"""Ground-truth world: registration, movement, replay round trip."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ortrack.model import (
    EQUIPMENT_ROOM,
    DuplicateTagError,
    GroundTruthEvent,
    InconsistentMoveError,
    ItemKind,
    Location,
    MoveCause,
    SubLocation,
    WorldState,
    replay,
)


def test_create_item_starts_in_equipment_room():
    world = WorldState()
    item = world.create_item(ItemKind.SPONGE, "T-001")
    assert world.placements[item.item_id] == Location(EQUIPMENT_ROOM)
    assert world.placements[item.item_id].sub is SubLocation.NONE


def test_create_item_rejects_duplicate_tag():
    world = WorldState()
    world.create_item(ItemKind.SPONGE, "T-001")
    with pytest.raises(DuplicateTagError):
        world.create_item(ItemKind.NEEDLE, "T-001")


def test_ten_creations_all_placed():
    world = WorldState()
    for i in range(10):
        world.create_item(ItemKind.CONSUMABLE, f"T-{i:03d}")
    assert len(world.placements) == 10
    assert all(loc == Location(EQUIPMENT_ROOM) for loc in world.placements.values())


def test_apply_ground_truth_moves_item():
    world = WorldState()
    item = world.create_item(ItemKind.SPONGE, "T-1")
    world.apply_ground_truth(GroundTruthEvent(
        time_s=5, item_id=item.item_id, src=Location(EQUIPMENT_ROOM),
        dst=Location("OR-1", SubLocation.TOOL_TRAY), cause=MoveCause.STAFF_MOVE))
    world.apply_ground_truth(GroundTruthEvent(
        time_s=9, item_id=item.item_id, src=Location("OR-1", SubLocation.TOOL_TRAY),
        dst=Location("OR-1", SubLocation.PATIENT_CAVITY),
        cause=MoveCause.PLACE_IN_CAVITY))
    assert world.placements[item.item_id].sub is SubLocation.PATIENT_CAVITY


def test_apply_ground_truth_rejects_wrong_source():
    world = WorldState()
    item = world.create_item(ItemKind.BLADE, "T-2")
    with pytest.raises(InconsistentMoveError):
        world.apply_ground_truth(GroundTruthEvent(
            time_s=1, item_id=item.item_id,
            src=Location("OR-1", SubLocation.TOOL_TRAY),
            dst=Location("SPD"), cause=MoveCause.ROOM_TRANSIT))


def test_event_must_change_location():
    with pytest.raises(ValueError):
        GroundTruthEvent(time_s=0, item_id="i", src=Location("SPD"),
                         dst=Location("SPD"), cause=MoveCause.STAFF_MOVE)


def test_sub_location_only_in_operating_room():
    with pytest.raises(ValueError):
        Location(EQUIPMENT_ROOM, SubLocation.TOOL_TRAY)
    assert Location("OR-3", SubLocation.TRASH_BIN).sub is SubLocation.TRASH_BIN


# A little walk machine for the replay property: at each step some item
# moves to a random location different from its current one.

_SPOTS = [Location(EQUIPMENT_ROOM), Location("SPD"),
          Location("OR-1", SubLocation.TOOL_TRAY),
          Location("OR-1", SubLocation.TRASH_BIN),
          Location("OR-1", SubLocation.PATIENT_CAVITY),
          Location("OR-1", SubLocation.STAFF_CARRIED),
          Location("OR-1", SubLocation.ROOM_SPACE)]


def _walk(n_items: int, steps: list[tuple[int, int]]) -> WorldState:
    world = WorldState()
    for i in range(n_items):
        world.create_item(ItemKind.INSTRUMENT, f"T-{i}")
    clock = 0
    for item_idx, spot_idx in steps:
        item = world.items[f"item-{(item_idx % n_items) + 1}"]
        src = world.placements[item.item_id]
        dst = _SPOTS[spot_idx % len(_SPOTS)]
        if dst == src:
            continue
        clock += 1
        world.apply_ground_truth(GroundTruthEvent(
            time_s=clock, item_id=item.item_id, src=src, dst=dst,
            cause=MoveCause.STAFF_MOVE))
    return world


@given(st.integers(1, 4),
       st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=40))
@settings(max_examples=200)
def test_replay_reproduces_placements(n_items, steps):
    world = _walk(n_items, steps)
    replayed = replay(list(world.items.values()), world.log)
    assert replayed.placements == world.placements


@given(st.integers(1, 4),
       st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=40))
@settings(max_examples=200)
def test_conservation_of_items(n_items, steps):
    world = _walk(n_items, steps)
    # every item is in exactly one place at every point in the walk
    assert len(world.placements) == n_items
    counts = {}
    for loc in world.placements.values():
        counts[loc] = counts.get(loc, 0) + 1
    assert sum(counts.values()) == n_items
