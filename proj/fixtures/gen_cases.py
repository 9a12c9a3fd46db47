#!/usr/bin/env python3
"""Generates the case14 and case30 fixtures (T=24, synthetic bids/loads).

Usage: python3 fixtures/gen_cases.py
Writes fixtures/case14.case and fixtures/case30.case deterministically.
"""
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def profile(t, base, swing=0.30, peak=18.0):
    return base * (1.0 - swing + swing * (1.0 + math.sin(2 * math.pi * (t - peak + 6.0) / 24.0)) / 2.0 * 2.0)


def series(vals, fmt="%.2f"):
    return "[" + ", ".join(fmt % v for v in vals) + "]"


def case30():
    T = 24
    lines = []
    lines.append("# 30-bus mesh, 24 hours: ten-bus backbone ring with chords and")
    lines.append("# twenty load spurs. Synthetic bids across four price levels, ramps")
    lines.append("# on the thermal fleet, an energy-limited hydro pair, and corridor")
    lines.append("# limits that bind around the evening peak.")
    lines.append("# Generated by fixtures/gen_cases.py")
    lines.append("meta { T = %d  base_mva = 100  name = case30 }" % T)

    buses = []
    # backbone ring n1..n10; n1 swing; PV at generator buses
    gens = {
        "n1": [("u1", 11.0, 120, 40, None), ("u2", 16.0, 90, 30, None)],
        "n3": [("u3", 13.5, 110, 35, None)],
        "n5": [("u4", 9.0, 100, None, "hydro"), ("u5", 21.0, 80, 25, None)],
        "n7": [("u6", 14.5, 100, 30, None), ("u7", 24.0, 70, 25, None)],
        "n8": [("u8", 9.5, 90, None, "hydro")],
        "n9": [("u9", 12.5, 110, 35, None), ("u10", 18.5, 80, 30, None)],
        "n10": [("u11", 15.5, 90, 30, None), ("u12", 26.0, 60, 20, None)],
    }
    pv_buses = {"n3": 60, "n5": 70, "n7": 55, "n9": 65, "n10": 55}
    for i in range(1, 11):
        bid = "n%d" % i
        if bid == "n1":
            buses.append("  { id = n1  kind = swing  v_set = 1.02 }")
        elif bid in pv_buses:
            buses.append("  { id = %s  kind = PV  v_set = 1.01  q_min = -%d  q_max = %d }"
                         % (bid, pv_buses[bid], pv_buses[bid]))
        else:
            buses.append("  { id = %s  kind = PQ }" % bid)
    for i in range(11, 31):
        buses.append("  { id = n%d  kind = PQ }" % i)

    branches = []
    bid = 0

    def add_branch(f, t, r, x, b=0.0):
        nonlocal bid
        bid += 1
        extra = ("  b_ch = %.3f" % b) if b else ""
        branches.append("  { id = e%d  from = %s  to = %s  r = %.4f  x = %.4f%s }"
                        % (bid, f, t, r, x, extra))
        return "e%d" % bid

    ring_ids = []
    for i in range(1, 11):
        j = i % 10 + 1
        ring_ids.append(add_branch("n%d" % i, "n%d" % j, 0.012, 0.075, 0.02))
    add_branch("n1", "n5", 0.015, 0.090, 0.02)
    add_branch("n3", "n8", 0.018, 0.100, 0.02)
    add_branch("n6", "n10", 0.016, 0.095, 0.02)
    # spurs: two per backbone bus
    spur = 11
    spur_of = {}
    for i in range(1, 11):
        for _ in range(2):
            eid = add_branch("n%d" % i, "n%d" % spur, 0.030, 0.130)
            spur_of["n%d" % spur] = eid
            spur += 1

    bids = []
    for bus, units in gens.items():
        for (uid, price, cap, ramp, group) in units:
            prices = [price * (1.0 + 0.08 * math.sin(2 * math.pi * (t - 16) / 24.0)) for t in range(T)]
            entry = "  { id = %s  bus = %s  price = %s  lb = 0  ub = %d" % (
                uid, bus, series(prices), cap)
            if ramp is not None:
                entry += "  ramp_up = %d  ramp_down = %d  p_initial = %d" % (ramp, ramp, cap // 3)
            entry += " }"
            bids.append(entry)

    groups = ["  { id = hydro  members = [u4, u8]  e_min = 400  e_max = 2300 }"]

    # corridor limits: the ring segments feeding the heavy south pockets
    flows = [
        "  { id = south  terms = [+%s, +%s]  limit = %s }" % (
            ring_ids[4], ring_ids[5], series([150.0] * 24)),
        "  { id = west  terms = [+%s, -%s]  limit = %s }" % (
            ring_ids[8], ring_ids[2], series([135.0] * 24)),
    ]

    demand = []
    base_load = {
        11: 14, 12: 10, 13: 16, 14: 12, 15: 18, 16: 13, 17: 20, 18: 16, 19: 22, 20: 17,
        21: 24, 22: 18, 23: 26, 24: 19, 25: 22, 26: 15, 27: 20, 28: 14, 29: 18, 30: 12,
    }
    for i in range(11, 31):
        p = [profile(t, base_load[i]) for t in range(T)]
        q = [0.25 * v for v in p]
        demand.append("  n%d { p = %s  q = %s }" % (i, series(p), series(q)))

    out = "\n".join(lines) + "\n\nbuses [\n" + "\n".join(buses) + "\n]\n\n"
    out += "branches [\n" + "\n".join(branches) + "\n]\n\n"
    out += "bids [\n" + "\n".join(bids) + "\n]\n\n"
    out += "energy_groups [\n" + "\n".join(groups) + "\n]\n\n"
    out += "flow_constraints [\n" + "\n".join(flows) + "\n]\n\n"
    out += "demand {\n" + "\n".join(demand) + "\n}\n"
    return out


def case14():
    T = 24
    lines = []
    lines.append("# 14-bus network over 24 hours: a five-bus core with nine spurs,")
    lines.append("# three price levels, ramps and one corridor limit.")
    lines.append("# Generated by fixtures/gen_cases.py")
    lines.append("meta { T = %d  base_mva = 100  name = case14 }" % T)

    buses = ["  { id = m1  kind = swing  v_set = 1.02 }",
             "  { id = m2  kind = PV  v_set = 1.01  q_min = -50  q_max = 50 }",
             "  { id = m3  kind = PV  v_set = 1.0  q_min = -40  q_max = 40 }"]
    for i in range(4, 15):
        buses.append("  { id = m%d  kind = PQ }" % i)

    branches = []
    eid = 0

    def add(f, t, r, x):
        nonlocal eid
        eid += 1
        branches.append("  { id = f%d  from = %s  to = %s  r = %.4f  x = %.4f }" % (eid, f, t, r, x))
        return "f%d" % eid

    core = [("m1", "m2"), ("m2", "m3"), ("m3", "m4"), ("m4", "m5"), ("m5", "m1"), ("m2", "m5")]
    core_ids = [add(f, t, 0.015, 0.085) for (f, t) in core]
    at = 6
    for host in ["m1", "m2", "m3", "m3", "m4", "m4", "m5", "m5", "m2"]:
        add(host, "m%d" % at, 0.035, 0.140)
        at += 1

    prices = {
        "g1": ("m1", 10.0, 150, 50),
        "g2": ("m2", 14.0, 120, 40),
        "g3": ("m3", 19.0, 100, 35),
        "g4": ("m5", 24.0, 80, 30),
    }
    bids = []
    for uid, (bus, price, cap, ramp) in prices.items():
        p = [price * (1.0 + 0.06 * math.sin(2 * math.pi * (t - 17) / 24.0)) for t in range(T)]
        bids.append("  { id = %s  bus = %s  price = %s  lb = 0  ub = %d  ramp_up = %d  "
                    "ramp_down = %d  p_initial = %d }" % (uid, bus, series(p), cap, ramp, ramp, cap // 3))

    flows = ["  { id = core45  terms = [+%s]  limit = %s }" % (core_ids[3], series([55.0] * T))]

    demand = []
    base_load = {6: 22, 7: 26, 8: 20, 9: 24, 10: 28, 11: 22, 12: 30, 13: 24, 14: 20}
    for i in range(6, 15):
        p = [profile(t, base_load[i]) for t in range(T)]
        q = [0.22 * v for v in p]
        demand.append("  m%d { p = %s  q = %s }" % (i, series(p), series(q)))

    out = "\n".join(lines) + "\n\nbuses [\n" + "\n".join(buses) + "\n]\n\n"
    out += "branches [\n" + "\n".join(branches) + "\n]\n\n"
    out += "bids [\n" + "\n".join(bids) + "\n]\n\n"
    out += "flow_constraints [\n" + "\n".join(flows) + "\n]\n\n"
    out += "demand {\n" + "\n".join(demand) + "\n}\n"
    return out


if __name__ == "__main__":
    with open(os.path.join(HERE, "case30.case"), "w") as f:
        f.write(case30())
    with open(os.path.join(HERE, "case14.case"), "w") as f:
        f.write(case14())
    print("wrote case30.case, case14.case")
