"""Exact integer linear algebra: determinants and Smith normal forms over Python ints."""

from __future__ import annotations


def bareiss_det(matrix) -> int:
    """Fraction-free Gaussian elimination; exact for integer matrices."""
    a = [list(map(int, row)) for row in matrix]
    n = len(a)
    if n == 0:
        return 1
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            swap = next((r for r in range(k + 1, n) if a[r][k] != 0), None)
            if swap is None:
                return 0
            a[k], a[swap] = a[swap], a[k]
            sign = -sign
        pivot = a[k][k]
        for i in range(k + 1, n):
            aik = a[i][k]
            row_i, row_k = a[i], a[k]
            for j in range(k + 1, n):
                row_i[j] = (row_i[j] * pivot - aik * row_k[j]) // prev
            row_i[k] = 0
        prev = pivot
    return sign * a[n - 1][n - 1]


def _smith_core(a, track: bool):
    """In-place Smith reduction of a dense matrix of Python ints.

    With ``track`` the row and column transforms U, V with U A V = D are
    accumulated as well.
    """
    n_rows = len(a)
    n_cols = len(a[0]) if n_rows else 0
    U = [[int(i == j) for j in range(n_rows)] for i in range(n_rows)] if track else None
    V = [[int(i == j) for j in range(n_cols)] for i in range(n_cols)] if track else None

    def swap_rows(i, j):
        a[i], a[j] = a[j], a[i]
        if track:
            U[i], U[j] = U[j], U[i]

    def swap_cols(i, j):
        for row in a:
            row[i], row[j] = row[j], row[i]
        if track:
            for row in V:
                row[i], row[j] = row[j], row[i]

    def add_row(dst, src, q):
        # row dst += q * row src
        rd, rs = a[dst], a[src]
        for k in range(n_cols):
            if rs[k]:
                rd[k] += q * rs[k]
        if track:
            ud, us = U[dst], U[src]
            for k in range(n_rows):
                if us[k]:
                    ud[k] += q * us[k]

    def add_col(dst, src, q):
        for row in a:
            if row[src]:
                row[dst] += q * row[src]
        if track:
            for row in V:
                if row[src]:
                    row[dst] += q * row[src]

    t = 0
    while t < min(n_rows, n_cols):
        best = None
        for i in range(t, n_rows):
            row = a[i]
            for j in range(t, n_cols):
                if row[j] and (best is None or abs(row[j]) < best[0]):
                    best = (abs(row[j]), i, j)
                    if best[0] == 1:
                        break
            if best and best[0] == 1:
                break
        if best is None:
            break
        _, i, j = best
        swap_rows(t, i)
        swap_cols(t, j)
        while True:
            p = a[t][t]
            dirty = False
            for i in range(t + 1, n_rows):
                if a[i][t]:
                    q = a[i][t] // p
                    add_row(i, t, -q)
                    if a[i][t]:
                        dirty = True
            for j in range(t + 1, n_cols):
                if a[t][j]:
                    q = a[t][j] // p
                    add_col(j, t, -q)
                    if a[t][j]:
                        dirty = True
            if dirty:
                # bring the smallest remaining entry of row/column t to the pivot
                cands = [(abs(a[i][t]), i, "r") for i in range(t + 1, n_rows) if a[i][t]]
                cands += [(abs(a[t][j]), j, "c") for j in range(t + 1, n_cols) if a[t][j]]
                _, k, kind = min(cands)
                if kind == "r":
                    swap_rows(t, k)
                else:
                    swap_cols(t, k)
                continue
            # divisibility: every remaining entry must be a multiple of the pivot
            bad = None
            for i in range(t + 1, n_rows):
                row = a[i]
                for j in range(t + 1, n_cols):
                    if row[j] % p:
                        bad = i
                        break
                if bad is not None:
                    break
            if bad is None:
                break
            add_row(t, bad, 1)
        if a[t][t] < 0:
            a[t] = [-x for x in a[t]]
            if track:
                U[t] = [-x for x in U[t]]
        t += 1
    diag = [a[k][k] for k in range(min(n_rows, n_cols))]
    return diag, U, V


def smith_invariants(matrix) -> list[int]:
    """Invariant factors d_1 | d_2 | ... of an integer matrix (zeros last)."""
    a = [list(map(int, row)) for row in matrix]
    if not a:
        return []
    diag, _, _ = _smith_core(a, track=False)
    return diag


def smith_with_transforms(matrix):
    """(U, D, V) with U A V = D diagonal; U, V unimodular."""
    a = [list(map(int, row)) for row in matrix]
    diag, U, V = _smith_core(a, track=True)
    return U, a, V, diag


def eliminate_unit_pivots(rows: dict):
    """Strip unit pivots from a sparse integer matrix by unimodular row and column
    operations.

    ``rows`` maps row index -> {column index: value}.  Each elimination of a
    +-1 pivot splits off a trivial invariant factor, so the Smith form of the
    input is [1] * count followed by the Smith form of the returned dense core.
    Pivots are chosen with the Markowitz rule to limit fill-in.
    """
    rows = {r: dict(cols) for r, cols in rows.items()}
    cols: dict = {}
    for r, entries in rows.items():
        for c in entries:
            cols.setdefault(c, set()).add(r)
    eliminated = 0
    while True:
        best = None
        for r, entries in rows.items():
            lr = len(entries) - 1
            for c, val in entries.items():
                if val == 1 or val == -1:
                    cost = lr * (len(cols[c]) - 1)
                    if best is None or cost < best[0]:
                        best = (cost, r, c)
                        if cost == 0:
                            break
            if best is not None and best[0] == 0:
                break
        if best is None:
            break
        _, r, c = best
        pivot_row = rows.pop(r)
        p = pivot_row[c]
        for c2 in pivot_row:
            cols[c2].discard(r)
        for r2 in list(cols[c]):
            target = rows[r2]
            factor = target[c] * p
            for c2, val in pivot_row.items():
                new = target.get(c2, 0) - factor * val
                if new:
                    if c2 not in target:
                        cols[c2].add(r2)
                    target[c2] = new
                elif c2 in target:
                    del target[c2]
                    cols[c2].discard(r2)
        del cols[c]
        eliminated += 1
    row_ids = sorted(rows)
    col_ids = sorted(cols)
    col_pos = {c: k for k, c in enumerate(col_ids)}
    core = [[0] * len(col_ids) for _ in row_ids]
    for k, r in enumerate(row_ids):
        for c, val in rows[r].items():
            core[k][col_pos[c]] = val
    return eliminated, core


def sparse_smith_invariants(rows: dict, size: int) -> list[int]:
    """Invariant factors of a square sparse integer matrix of the given size."""
    ones, core = eliminate_unit_pivots(rows)
    rest = smith_invariants(core) if core else []
    # empty columns in the core would show up as zero invariants
    rest += [0] * (size - ones - len(rest))
    return [1] * ones + rest
