"""Retail domain: tool implementations and executable policy checks.

Observation payloads are the affected documents themselves, except for
``list_user_orders`` and ``find_user_by_email`` which return small lookup
objects (see each tool's ``returns`` text).
"""
from __future__ import annotations

from typing import Any, Dict, List, Optional

from .domain_env import EntityStore, ToolError, ToolParam, ToolRegistry, TraceStep

registry = ToolRegistry()

CANCEL_REASONS = ("no longer needed", "ordered by mistake")
ADDRESS_FIELDS = ("address1", "city", "state", "zip", "country")

ORDER_ID = ToolParam(name="order_id", type="string", description="Order id such as 'o_1'.")
USER_ID = ToolParam(name="user_id", type="string", description="User id such as 'u_1'.")
ADDRESS = ToolParam(
    name="address",
    type="object",
    description="Address with address1, city, state, zip and country.",
)
ORDER_FIELDS = ("order_id", "user_id", "status", "item_id", "item_ids", "payment_method_id", "address")


def _check_address(address: Dict[str, Any]) -> Dict[str, str]:
    for field in ADDRESS_FIELDS:
        if not isinstance(address.get(field), str) or not address[field]:
            raise ToolError(f"address missing field '{field}'")
    extra = set(address) - set(ADDRESS_FIELDS)
    if extra:
        raise ToolError(f"address has unknown fields {sorted(extra)}")
    return {field: address[field] for field in ADDRESS_FIELDS}


# --- read tools ------------------------------------------------------------


@registry.tool(
    kind="read",
    params=[USER_ID],
    returns="the user document: name, email, address, payment_methods, orders",
    outputs=("user_id", "email", "address", "payment_method_id", "order_id"),
)
def get_user(store: EntityStore, user_id: str) -> Dict[str, Any]:
    """Get the details of a user."""
    return store.require("users", user_id, "user")


@registry.tool(
    kind="read",
    params=[ToolParam(name="email", type="string", description="Email address of the user.")],
    returns="{'user_id': str}",
    outputs=("user_id",),
)
def find_user_by_email(store: EntityStore, email: str) -> Dict[str, Any]:
    """Find a user id by email address."""
    for user_id in sorted(store.collections.get("users", {})):
        if store.collections["users"][user_id]["email"].lower() == email.lower():
            return {"user_id": user_id}
    raise ToolError("user not found")


@registry.tool(
    kind="read",
    params=[ORDER_ID],
    returns="the order document: user_id, status, items, address, payment_method_id",
    outputs=ORDER_FIELDS,
)
def get_order(store: EntityStore, order_id: str) -> Dict[str, Any]:
    """Get the status and details of an order."""
    return store.require("orders", order_id, "order")


@registry.tool(
    kind="read",
    params=[USER_ID],
    returns="{'user_id': str, 'order_ids': [str]}",
    outputs=("user_id", "order_id"),
)
def list_user_orders(store: EntityStore, user_id: str) -> Dict[str, Any]:
    """List the order ids placed by a user."""
    user = store.require("users", user_id, "user")
    return {"user_id": user_id, "order_ids": list(user["orders"])}


@registry.tool(
    kind="read",
    params=[ToolParam(name="product_id", type="string", description="Product id such as 'p_1'.")],
    returns="the product document with its item variants, prices and availability",
    outputs=("product_id", "name"),
)
def get_product(store: EntityStore, product_id: str) -> Dict[str, Any]:
    """Get a product and all of its item variants."""
    return store.require("products", product_id, "product")


# --- write tools -----------------------------------------------------------


@registry.tool(
    kind="write",
    params=[
        ORDER_ID,
        ToolParam(
            name="reason",
            type="string",
            description="Either 'no longer needed' or 'ordered by mistake'.",
        ),
    ],
    returns="the updated order document",
    outputs=("order_id", "status"),
)
def cancel_order(store: EntityStore, order_id: str, reason: str) -> Dict[str, Any]:
    """Cancel a pending order."""
    order = store.require("orders", order_id, "order")
    if reason not in CANCEL_REASONS:
        raise ToolError(f"invalid reason '{reason}'")
    order["status"] = "cancelled"
    order["cancel_reason"] = reason
    return order


@registry.tool(
    kind="write",
    params=[
        ORDER_ID,
        ToolParam(name="item_ids", type="array", description="Item ids of the order to return."),
        ToolParam(
            name="payment_method_id",
            type="string",
            description="Payment method receiving the refund.",
        ),
    ],
    returns="the updated order document",
    outputs=("order_id", "status"),
)
def return_order(
    store: EntityStore, order_id: str, item_ids: List[str], payment_method_id: str
) -> Dict[str, Any]:
    """Request the return of some items of a delivered order."""
    order = store.require("orders", order_id, "order")
    if not item_ids:
        raise ToolError("no items to return")
    in_order = {item["item_id"] for item in order["items"]}
    for item_id in item_ids:
        if item_id not in in_order:
            raise ToolError(f"item {item_id} not in order")
    if len(set(item_ids)) != len(item_ids):
        raise ToolError("duplicate item ids")
    order["status"] = "return requested"
    order["return_items"] = sorted(item_ids)
    order["refund_payment_method_id"] = payment_method_id
    return order


@registry.tool(
    kind="write",
    params=[
        ORDER_ID,
        ToolParam(name="item_id", type="string", description="Item id in the order to exchange."),
        ToolParam(
            name="new_item_id",
            type="string",
            description="Item id of an available variant of the same product.",
        ),
    ],
    returns="the updated order document",
    outputs=("order_id", "item_id", "status"),
)
def exchange_item(store: EntityStore, order_id: str, item_id: str, new_item_id: str) -> Dict[str, Any]:
    """Exchange one item of a delivered order for another variant of the same product."""
    order = store.require("orders", order_id, "order")
    position = next((i for i, item in enumerate(order["items"]) if item["item_id"] == item_id), None)
    if position is None:
        raise ToolError(f"item {item_id} not in order")
    if new_item_id == item_id:
        raise ToolError("new item must differ from the current item")
    line = order["items"][position]
    product = store.require("products", line["product_id"], "product")
    variant = product["items"].get(new_item_id)
    if variant is None:
        raise ToolError(f"item {new_item_id} is not a variant of {line['product_id']}")
    if not variant["available"]:
        raise ToolError(f"item {new_item_id} not available")
    order["items"][position] = {
        "item_id": new_item_id,
        "product_id": line["product_id"],
        "name": line["name"],
        "options": dict(variant["options"]),
        "price": variant["price"],
    }
    order["status"] = "exchange requested"
    order.setdefault("exchanges", []).append({"from": item_id, "to": new_item_id})
    return order


@registry.tool(
    kind="write",
    params=[ORDER_ID, ADDRESS],
    returns="the updated order document",
    outputs=("order_id", "address"),
)
def modify_order_address(store: EntityStore, order_id: str, address: Dict[str, Any]) -> Dict[str, Any]:
    """Change the shipping address of a pending order."""
    order = store.require("orders", order_id, "order")
    order["address"] = _check_address(address)
    return order


@registry.tool(
    kind="write",
    params=[USER_ID, ADDRESS],
    returns="the updated user document",
    outputs=("user_id", "address"),
)
def modify_user_address(store: EntityStore, user_id: str, address: Dict[str, Any]) -> Dict[str, Any]:
    """Change the default address of a user."""
    user = store.require("users", user_id, "user")
    user["address"] = _check_address(address)
    return user


# --- policy checks ---------------------------------------------------------

REQUIRED_STATUS = {
    "cancel_order": "pending",
    "modify_order_address": "pending",
    "return_order": "delivered",
    "exchange_item": "delivered",
}
STATUS_AFTER = {
    "cancel_order": "cancelled",
    "return_order": "return requested",
    "exchange_item": "exchange requested",
}


def order_status_precondition(
    trace: List[TraceStep], before: EntityStore, after: EntityStore
) -> Optional[str]:
    # Status is tracked through the trace so an earlier action can
    # invalidate a later one.
    status = {oid: doc["status"] for oid, doc in before.collections.get("orders", {}).items()}
    problems = []
    for step in trace:
        name = step.call.name
        if step.result.status != "ok" or name not in REQUIRED_STATUS:
            continue
        order_id = step.call.arguments["order_id"]
        current = status.get(order_id)
        needed = REQUIRED_STATUS[name]
        if current != needed:
            changed = current != before.collections["orders"][order_id]["status"]
            suffix = " after an earlier action" if changed else ""
            problems.append(f"{name}({order_id}) requires a {needed} order but it was {current}{suffix}")
        if name in STATUS_AFTER:
            status[order_id] = STATUS_AFTER[name]
    return "; ".join(problems) or None


def cancel_return_conflict(
    trace: List[TraceStep], before: EntityStore, after: EntityStore
) -> Optional[str]:
    cancelled = {s.call.arguments.get("order_id") for s in trace if s.call.name == "cancel_order"}
    returned = {s.call.arguments.get("order_id") for s in trace if s.call.name == "return_order"}
    both = sorted(o for o in cancelled & returned if o)
    if both:
        return f"order(s) {', '.join(both)} both cancelled and returned"
    return None


def refund_to_owned_payment_method(
    trace: List[TraceStep], before: EntityStore, after: EntityStore
) -> Optional[str]:
    for step in trace:
        if step.call.name != "return_order" or step.result.status != "ok":
            continue
        order_id = step.call.arguments["order_id"]
        method = step.call.arguments["payment_method_id"]
        order = before.collections["orders"][order_id]
        user = before.collections["users"][order["user_id"]]
        owned = user["payment_methods"]
        if method not in owned:
            return f"refund for {order_id} goes to {method}, which {order['user_id']} does not own"
        if method != order["payment_method_id"] and owned[method]["source"] != "gift_card":
            return f"refund for {order_id} must go to the original payment method or a gift card"
    return None


POLICY_CHECKS = {
    "order_status_precondition": order_status_precondition,
    "cancel_return_conflict": cancel_return_conflict,
    "refund_to_owned_payment_method": refund_to_owned_payment_method,
}


def sample_metadata(collection: str, doc: Dict[str, Any]) -> Dict[str, Any]:
    """Metadata attached to sampled documents in generation prompts."""
    if collection == "orders":
        return {
            "cost": round(sum(item["price"] for item in doc["items"]), 2),
            "item_count": len(doc["items"]),
            "status": doc["status"],
        }
    if collection == "users":
        return {"order_count": len(doc["orders"]), "payment_methods": sorted(doc["payment_methods"])}
    return {}
