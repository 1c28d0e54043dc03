"""Builds data/india_states_daily.csv, a reconstructed daily new-case file.

Each named state gets cumulative totals at the first of every month from
March 2020 to October 2021. A monotone cubic (PCHIP) through those anchors
gives a smooth daily curve; weekly reporting seasonality and multiplicative
noise are applied and every month is then rescaled and integer-rounded so its
new cases sum exactly to the anchor difference. The gap between the national
total and the named states is split among smaller states and territories by
fixed shares.

Run from the repository root:  python3 data/tools/make_fixture.py
"""

import csv
import datetime as dt
import sys
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

SEED = 20211001
START = dt.date(2020, 3, 1)
END = dt.date(2021, 9, 30)

ANCHOR_DATES = [dt.date(2020 + (2 + i) // 12, (2 + i) % 12 + 1, 1) for i in range(20)]

# Cumulative national totals at each anchor date.
INDIA = [
    0, 1998, 35043, 190535, 585493, 1695988, 3691166, 6312584, 8184082, 9462809,
    10286709, 10757610, 11112056, 12221665, 19164969, 28175044, 30411634,
    31655824, 32810845, 33766707,
]

STATES = {
    "Maharashtra": [0, 302, 10498, 67655, 174761, 422118, 792541, 1384446, 1678406, 1823896,
                    1932112, 2026399, 2155070, 2812980, 4602472, 5746892, 6061404, 6303715, 6464876, 6541119],
    "Kerala": [0, 241, 497, 1269, 4442, 23613, 75385, 196106, 433100, 602982,
               760933, 929178, 1059403, 1124584, 1571183, 2526579, 2924165, 3390761, 4057233, 4613937],
    "Tamil Nadu": [0, 234, 2323, 22333, 90167, 245859, 428041, 597602, 724522, 781915,
                   818935, 838340, 851542, 886673, 1166756, 2096516, 2479696, 2559597, 2614872, 2655572],
    "Delhi": [0, 152, 3515, 19844, 87360, 135598, 174748, 279715, 386706, 570374,
              625369, 635096, 639289, 662430, 1149333, 1426240, 1434188, 1436265, 1437764, 1438685],
    "Uttar Pradesh": [0, 103, 2281, 7823, 23492, 85461, 230414, 399082, 481863, 543888,
                      585030, 600299, 603527, 617194, 1252324, 1691488, 1706107, 1708441, 1709335, 1709761],
    "Karnataka": [0, 101, 565, 3221, 15242, 124115, 342423, 601767, 823412, 884897,
                  918544, 939387, 951251, 997004, 1523142, 2604431, 2843810, 2905124, 2949445, 2972620],
    "Telangana": [0, 96, 1039, 2698, 16339, 62703, 127697, 193600, 240048, 270318,
                  286354, 294000, 297000, 303000, 435606, 577000, 619000, 642000, 655000, 665000],
    "Rajasthan": [0, 93, 2584, 8831, 18014, 43243, 81693, 137000, 195000, 262805,
                  306000, 317491, 320336, 328000, 598001, 939958, 952422, 953000, 953800, 954000],
    "Andhra Pradesh": [0, 83, 1463, 3679, 14595, 140933, 434771, 693484, 823348, 868064,
                       881948, 887836, 889916, 901989, 1101690, 1693085, 1889513, 1966175, 2014116, 2045657],
    "Gujarat": [0, 82, 4395, 16779, 32557, 61438, 96000, 141000, 172000, 208000,
                242000, 258000, 267000, 303000, 555000, 809000, 823000, 824500, 825200, 825800],
    "Madhya Pradesh": [0, 66, 2719, 8089, 13593, 31806, 68000, 127000, 170000, 207000,
                       239000, 256000, 262000, 290000, 525000, 785000, 789000, 791500, 792000, 792500],
    "West Bengal": [0, 37, 795, 5501, 18559, 70188, 162778, 257049, 373664, 483484,
                    550893, 569998, 575118, 586915, 828366, 1376377, 1499783, 1528019, 1548604, 1565645],
    "Bihar": [0, 23, 425, 3815, 10000, 51233, 136457, 180000, 215000, 235000,
              252000, 260000, 262000, 265000, 430000, 712000, 721000, 724000, 725200, 725800],
    "Assam": [0, 16, 43, 1390, 8407, 40269, 109040, 179000, 205000, 211000,
              216000, 217500, 218000, 219000, 265000, 417000, 510000, 561000, 589000, 600000],
    "Odisha": [0, 4, 143, 1948, 7065, 33479, 103536, 219119, 290116, 318725,
               329000, 335072, 337191, 340917, 420000, 793000, 912000, 977268, 1007750, 1023735],
    "Chhattisgarh": [0, 9, 43, 498, 2795, 9192, 31000, 120000, 190000, 240000,
                     280000, 305000, 313000, 349187, 728700, 971463, 994480, 1002008, 1004451, 1005229],
    "Haryana": [0, 29, 357, 2091, 14548, 34965, 65000, 130000, 165000, 230000,
                260000, 267000, 271000, 290000, 530000, 760000, 768000, 770000, 770500, 771000],
    "Punjab": [0, 41, 480, 2263, 5668, 16119, 50000, 116000, 132000, 151000,
               166000, 172000, 183000, 234000, 365000, 575000, 595000, 599000, 600500, 601300],
}

# Shares of the remainder (national minus named states).
SMALL = {
    "Jharkhand": 0.160,
    "Uttarakhand": 0.158,
    "Jammu and Kashmir": 0.152,
    "Himachal Pradesh": 0.101,
    "Goa": 0.082,
    "Puducherry": 0.058,
    "Manipur": 0.055,
    "Mizoram": 0.046,
    "Tripura": 0.039,
    "Meghalaya": 0.037,
    "Chandigarh": 0.030,
    "Arunachal Pradesh": 0.025,
    "Nagaland": 0.014,
    "Sikkim": 0.014,
    "Ladakh": 0.010,
    "Lakshadweep": 0.005,
    "Dadra and Nagar Haveli and Daman and Diu": 0.005,
    "Andaman and Nicobar Islands": 0.009,
}

# Relative reporting level by weekday (Monday first): weekend testing dips
# show up in Monday and Tuesday counts.
WEEKDAY = np.array([0.86, 0.92, 1.04, 1.06, 1.05, 1.04, 1.03])


def days_between(a, b):
    return (b - a).days


def largest_remainder(weights, total):
    """Integers proportional to `weights` summing exactly to `total`."""
    if total == 0:
        return np.zeros(len(weights), dtype=np.int64)
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        w = np.ones_like(w)
    raw = w / w.sum() * total
    base = np.floor(raw).astype(np.int64)
    short = int(total - base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def daily_series(anchors, rng):
    x = np.array([days_between(START, d) for d in ANCHOR_DATES], dtype=float)
    y = np.array(anchors, dtype=float)
    curve = PchipInterpolator(x, y)
    n = days_between(START, END) + 1
    t = np.arange(n + 1, dtype=float)
    smooth = np.clip(np.diff(curve(t)), 0.0, None)
    weekday = np.array([WEEKDAY[(START + dt.timedelta(days=int(i))).weekday()] for i in range(n)])
    noisy = smooth * weekday * rng.lognormal(0.0, 0.08, size=n)
    out = np.zeros(n, dtype=np.int64)
    for k in range(len(ANCHOR_DATES) - 1):
        a = days_between(START, ANCHOR_DATES[k])
        b = days_between(START, ANCHOR_DATES[k + 1])
        out[a:b] = largest_remainder(noisy[a:b], anchors[k + 1] - anchors[k])
    return out


def check_anchors():
    named = np.array(list(STATES.values()), dtype=np.int64)
    remainder = np.array(INDIA) - named.sum(axis=0)
    problems = []
    if (np.diff(remainder) < 0).any() or (remainder < 0).any():
        problems.append(f"remainder not monotone/non-negative: {remainder.tolist()}")
    for name, values in STATES.items():
        if any(b < a for a, b in zip(values, values[1:])):
            problems.append(f"{name} cumulative decreases")
    # Month-start rankings must hold with the small states included.
    for k in range(1, len(ANCHOR_DATES)):
        totals = {name: v[k] for name, v in STATES.items()}
        for name, share in SMALL.items():
            totals[name] = remainder[k] * share
        top = sorted(totals.values(), reverse=True)
        tenth = top[9]
        for name, share in SMALL.items():
            if remainder[k] * share >= tenth:
                problems.append(f"{name} enters the top ten at {ANCHOR_DATES[k]}")
    return remainder, problems


def main():
    assert abs(sum(SMALL.values()) - 1.0) < 1e-9
    remainder, problems = check_anchors()
    if problems:
        print("\n".join(problems), file=sys.stderr)
        sys.exit(1)
    small_anchors = {}
    shares = np.array(list(SMALL.values()))
    for k, total in enumerate(remainder):
        split = largest_remainder(shares, int(total))
        for name, v in zip(SMALL, split):
            small_anchors.setdefault(name, []).append(int(v))

    rng = np.random.default_rng(SEED)
    regions = {**STATES, **small_anchors}
    n = days_between(START, END) + 1
    rows = []
    for name in sorted(regions):
        values = daily_series(regions[name], rng)
        assert values.sum() == regions[name][-1]
        for i in range(n):
            rows.append(((START + dt.timedelta(days=i)).isoformat(), name, int(values[i])))

    out = Path(__file__).resolve().parent.parent / "india_states_daily.csv"
    with out.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["date", "region", "new_cases"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows for {len(regions)} regions to {out}")


if __name__ == "__main__":
    main()
