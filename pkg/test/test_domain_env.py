import random

import pytest

from src.domain_env import (
    DiffPatch,
    EntityStore,
    Hunk,
    PolicyRule,
    SnapshotError,
    StateSnapshot,
    ToolCall,
    ToolError,
    ToolParam,
    ToolRegistry,
    ToolResult,
    TraceStep,
    apply_patch,
    diff,
    execute,
    fork,
    run_policies,
    snapshot,
)
from src.retail_pack import CANCEL_REASONS


def call(name, **arguments):
    return ToolCall(name=name, arguments=arguments)


def test_read_tool_leaves_store_unchanged(pack):
    store = pack.fresh_store()
    before = snapshot(store)
    result = pack.execute(call("get_order", order_id="o_1"), store)
    assert result.status == "ok"
    assert result.payload["status"] == "pending"
    assert snapshot(store) == before


def test_write_tool_commits(pack):
    store = pack.fresh_store()
    result = pack.execute(call("cancel_order", order_id="o_1", reason="no longer needed"), store)
    assert result.status == "ok"
    assert store.get("orders", "o_1")["status"] == "cancelled"
    assert store.get("orders", "o_1")["cancel_reason"] == "no longer needed"


def test_failed_write_is_a_no_op(pack):
    store = pack.fresh_store()
    before = snapshot(store)
    result = pack.execute(call("cancel_order", order_id="o_1", reason="too expensive"), store)
    assert result == ToolResult.error("invalid reason 'too expensive'")
    assert snapshot(store) == before


def test_unknown_entity(pack):
    result = pack.execute(call("get_order", order_id="o_999"), pack.fresh_store())
    assert result.status == "error"
    assert result.message == "order not found"


@pytest.mark.parametrize(
    "tool_call, message",
    [
        (call("refund_everything"), "unknown tool 'refund_everything'"),
        (call("get_order"), "missing required argument 'order_id' for get_order"),
        (call("get_order", order_id=1), "argument 'order_id' of get_order expects string"),
        (call("get_order", order_id="o_1", verbose=True), "unexpected argument 'verbose' for get_order"),
        (
            call("modify_user_address", user_id="u_1", address="1 Main St"),
            "argument 'address' of modify_user_address expects object",
        ),
    ],
)
def test_argument_validation(pack, tool_call, message):
    result = pack.execute(tool_call, pack.fresh_store())
    assert result.status == "error"
    assert result.message == message


def test_fork_is_independent(pack):
    a = pack.fresh_store()
    b = fork(a)
    pack.execute(call("cancel_order", order_id="o_4", reason="ordered by mistake"), a)
    assert a.get("orders", "o_4")["status"] == "cancelled"
    assert b.get("orders", "o_4")["status"] == "pending"
    assert pack.seed.get("orders", "o_4")["status"] == "pending"


def test_schema_violation_is_rejected(pack):
    registry = ToolRegistry()

    @registry.tool(kind="write", params=[ToolParam(name="order_id", type="string")])
    def corrupt_status(store, order_id):
        """Write a non-string status."""
        store.collections["orders"][order_id]["status"] = 5
        return {"order_id": order_id}

    store = pack.fresh_store()
    before = snapshot(store)
    result = execute(call("corrupt_status", order_id="o_1"), store, registry, pack.schema)
    assert result.status == "error"
    assert result.message.startswith("schema violation: orders/o_1")
    assert snapshot(store) == before


def test_tool_crash_becomes_error_result():
    registry = ToolRegistry()

    @registry.tool(kind="write")
    def explode(store):
        """Always fails."""
        raise RuntimeError("disk on fire")

    store = EntityStore({"orders": {}})
    result = execute(call("explode"), store, registry)
    assert result == ToolResult.error("internal tool error: disk on fire")


def test_tool_without_payload_becomes_error_result():
    registry = ToolRegistry()

    @registry.tool(kind="write")
    def forgetful(store):
        """Writes but returns nothing."""
        store.collections["orders"]["o_1"] = {"id": "o_1"}

    store = EntityStore({"orders": {}})
    result = execute(call("forgetful"), store, registry)
    assert result == ToolResult.error("internal tool error: forgetful returned no payload")
    assert store.collections == {"orders": {}}


def test_tool_error_message_passes_through():
    registry = ToolRegistry()

    @registry.tool(kind="read")
    def refuse(store):
        """Always refuses."""
        raise ToolError("not today")

    assert execute(call("refuse"), EntityStore(), registry).message == "not today"


def test_tool_result_shape():
    with pytest.raises(ValueError):
        ToolResult(status="ok", payload=None)
    with pytest.raises(ValueError):
        ToolResult(status="error", payload={"a": 1}, message="x")
    assert ToolResult.error("nope").to_content() == '{"error": "nope"}'


def test_tool_spec_renderings(pack):
    spec = pack.registry.specs["cancel_order"]
    schema = spec.to_openai()["function"]
    assert schema["name"] == "cancel_order"
    assert schema["parameters"]["required"] == ["order_id", "reason"]
    assert spec.to_python().startswith("def cancel_order(order_id: str, reason: str) -> dict:")


def test_canonical_call_ignores_call_id():
    a = ToolCall(name="get_order", arguments={"order_id": "o_1"}, call_id="call_0")
    assert a.canonical() == '{"arguments":{"order_id":"o_1"},"name":"get_order"}'
    assert ToolCall.from_canonical(a.canonical()) == ToolCall(name="get_order", arguments={"order_id": "o_1"})


# --- snapshots and diff patches ---------------------------------------------


def test_snapshot_is_canonical():
    a = snapshot(EntityStore({"b": {"x": {"n": 1.5}}, "a": {}}))
    b = snapshot(EntityStore({"a": {}, "b": {"x": {"n": 1.5}}}))
    assert a == b
    assert a.canonical == '{"a":{},"b":{"x":{"n":1.5}}}'


def test_malformed_snapshot_raises():
    with pytest.raises(SnapshotError):
        diff(StateSnapshot(canonical="{not json"), StateSnapshot(canonical="{}"))
    with pytest.raises(SnapshotError):
        StateSnapshot(canonical="[1, 2]").load()


def test_diff_of_identical_snapshots_is_empty(pack):
    assert not diff(snapshot(pack.seed), snapshot(pack.fresh_store()))
    assert DiffPatch().render() == "(empty)"


def test_diff_hunks_for_cancel(pack):
    store = pack.fresh_store()
    pack.execute(call("cancel_order", order_id="o_1", reason="no longer needed"), store)
    patch = diff(snapshot(pack.seed), snapshot(store))
    assert patch.hunks == [
        Hunk(op="add", path="orders/o_1/cancel_reason", after="no longer needed"),
        Hunk(op="replace", path="orders/o_1/status", before="pending", after="cancelled"),
    ]
    assert "~ orders/o_1/status" in patch.render()


def test_path_segments_are_escaped():
    before = snapshot(EntityStore({"a/b": {"~x": 1}}))
    after = snapshot(EntityStore({"a/b": {"~x": 2}}))
    patch = diff(before, after)
    assert patch.paths() == {"a~1b/~0x"}
    assert apply_patch(before, patch) == after


def test_apply_patch_rejects_mismatch():
    before = StateSnapshot(canonical='{"a":{"b":1}}')
    with pytest.raises(SnapshotError):
        apply_patch(before, DiffPatch(hunks=[Hunk(op="replace", path="a/b", before=2, after=3)]))
    with pytest.raises(SnapshotError):
        apply_patch(before, DiffPatch(hunks=[Hunk(op="add", path="a/b", after=3)]))
    with pytest.raises(SnapshotError):
        apply_patch(before, DiffPatch(hunks=[Hunk(op="remove", path="x/y", before=1)]))


_MISSING = object()


def _structural_changes(before, after, path=()):
    """Independent oracle: leaf paths whose values differ."""
    if isinstance(before, dict) and isinstance(after, dict):
        changes = {}
        for key in set(before) | set(after):
            changes.update(
                _structural_changes(before.get(key, _MISSING), after.get(key, _MISSING), path + (key,))
            )
        return changes
    if before is not _MISSING and after is not _MISSING and before == after:
        return {}
    return {path: (before, after)}


def _hunk_changes(patch):
    changes = {}
    for hunk in patch.hunks:
        key = tuple(hunk.path.split("/"))
        changes[key] = (
            _MISSING if hunk.op == "add" else hunk.before,
            _MISSING if hunk.op == "remove" else hunk.after,
        )
    return changes


def _random_address(rng):
    return {
        "address1": f"{rng.randint(1, 99)} {rng.choice(['Oak', 'Main', 'Lake'])} Street",
        "city": rng.choice(["Austin", "Denver", "Boston"]),
        "state": rng.choice(["TX", "CO", "MA"]),
        "zip": f"{rng.randint(10000, 99999)}",
        "country": "USA",
    }


def _random_write(rng, store):
    order_id = rng.choice(sorted(store.collections["orders"]))
    order = store.collections["orders"][order_id]
    items = [item["item_id"] for item in order["items"]]
    choice = rng.randrange(5)
    if choice == 0:
        return call("cancel_order", order_id=order_id, reason=rng.choice(CANCEL_REASONS))
    if choice == 1:
        return call(
            "return_order",
            order_id=order_id,
            item_ids=rng.sample(items, rng.randint(1, len(items))),
            payment_method_id=order["payment_method_id"],
        )
    if choice == 2:
        return call(
            "exchange_item",
            order_id=order_id,
            item_id=rng.choice(items),
            new_item_id=rng.choice(["i_101", "i_102", "i_103", "i_201", "i_202", "i_301", "i_302"]),
        )
    if choice == 3:
        return call("modify_order_address", order_id=order_id, address=_random_address(rng))
    return call("modify_user_address", user_id=rng.choice(["u_1", "u_2", "u_3"]), address=_random_address(rng))


@pytest.mark.parametrize("seed", range(200))
def test_diff_matches_structural_oracle(pack, seed):
    rng = random.Random(seed)
    store = pack.fresh_store()
    for _ in range(rng.randint(0, 6)):
        pack.execute(_random_write(rng, store), store)

    before, after = snapshot(pack.seed), snapshot(store)
    patch = diff(before, after)
    assert _hunk_changes(patch) == _structural_changes(before.load(), after.load())
    assert apply_patch(before, patch) == after
    assert (not patch) == (before == after)


# --- policies ------------------------------------------------------------------


def _trace(pack, *calls):
    store = pack.fresh_store()
    return pack.replay(list(calls), store), store


def test_policies_pass_for_valid_exchange(pack):
    trace, store = _trace(pack, call("exchange_item", order_id="o_2", item_id="i_102", new_item_id="i_101"))
    assert run_policies(pack.policies, trace, pack.seed, store) == []


def test_cancel_then_return_violates_policies(pack):
    trace, store = _trace(
        pack,
        call("cancel_order", order_id="o_1", reason="no longer needed"),
        call("return_order", order_id="o_1", item_ids=["i_101"], payment_method_id="card_1001"),
    )
    assert all(step.result.status == "ok" for step in trace)
    violations = {v.rule_id: v.message for v in run_policies(pack.policies, trace, pack.seed, store)}
    assert violations["cancel_return_conflict"] == "order(s) o_1 both cancelled and returned"
    assert "return_order(o_1) requires a delivered order" in violations["order_status_precondition"]


def test_status_precondition_tracks_earlier_actions(pack):
    trace, store = _trace(
        pack,
        call("exchange_item", order_id="o_2", item_id="i_102", new_item_id="i_101"),
        call("return_order", order_id="o_2", item_ids=["i_301"], payment_method_id="card_1001"),
    )
    violations = run_policies(pack.policies, trace, pack.seed, store)
    assert [v.rule_id for v in violations] == ["order_status_precondition"]
    assert violations[0].message.endswith("after an earlier action")


@pytest.mark.parametrize(
    "method, ok",
    [("card_1001", True), ("gift_card_1001", True), ("card_2001", False)],
)
def test_refund_destination(pack, method, ok):
    trace, store = _trace(
        pack, call("return_order", order_id="o_2", item_ids=["i_102"], payment_method_id=method)
    )
    ids = [v.rule_id for v in run_policies(pack.policies, trace, pack.seed, store)]
    assert ("refund_to_owned_payment_method" not in ids) == ok


def test_crashing_rule_fails_closed():
    def broken(trace, before, after):
        raise KeyError("order_id")

    rule = PolicyRule(id="broken", description="always crashes", check=broken)
    trace = [TraceStep(call=call("noop"), result=ToolResult.ok({}))]
    violations = run_policies([rule], trace, EntityStore(), EntityStore())
    assert len(violations) == 1
    assert violations[0].rule_error is True
    assert violations[0].message.startswith("rule-error")


def test_replay_stops_at_first_error(pack):
    trace, store = _trace(
        pack,
        call("get_order", order_id="o_9"),
        call("cancel_order", order_id="o_1", reason="no longer needed"),
    )
    assert len(trace) == 1
    assert store.get("orders", "o_1")["status"] == "pending"
