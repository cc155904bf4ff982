#!/usr/bin/env python3
"""Generate the packaged 1k-user Amazon-style ratings fixture.

Format: user,item,rating,timestamp with no header, rows shuffled out of
chronological order so ingestion has to sort. Popularity is skewed and some
users/items sit below the 5-interaction threshold so core filtering has real
work to do. Deterministic; rerunning reproduces the committed file exactly.
"""

import numpy as np

OUT = "tests/fixtures/amazon_1k.csv"
N_USERS = 1000
N_ITEMS = 900
BASE_TS = 1325376000  # 2012-01-01


def main():
    rng = np.random.default_rng(20240101)
    rows = []
    popularity = rng.zipf(1.3, size=N_ITEMS).astype(np.float64)
    popularity /= popularity.sum()
    for u in range(N_USERS):
        n = int(rng.integers(3, 26))
        items = rng.choice(N_ITEMS, size=n, replace=False, p=popularity)
        start_day = int(rng.integers(0, 700))
        days = np.sort(rng.choice(1000, size=n, replace=False)) + start_day
        for item, day in zip(items, days):
            ts = BASE_TS + int(day) * 86400 + int(rng.integers(0, 86400))
            rating = int(rng.integers(1, 6))
            rows.append((f"A{u:06d}", f"B{int(item):06d}", rating, ts))
    order = rng.permutation(len(rows))
    with open(OUT, "w", encoding="utf-8") as fh:
        for i in order:
            u, item, r, ts = rows[i]
            fh.write(f"{u},{item},{r},{ts}\n")
    print(f"wrote {len(rows)} rows to {OUT}")


if __name__ == "__main__":
    main()
