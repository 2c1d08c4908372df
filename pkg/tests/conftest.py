import numpy as np
import pytest

from hawkfuse.data import EventRecord, MarkedDataset, Window
from hawkfuse.nmf import ToxMatrix

UNIT_WINDOW = Window(0.0, 10.0, 0.0, 1.0, 0.0, 1.0)


def make_dataset(rows, window=None, n_groups=1):
    """rows: (id, t, x, y, source, mark-or-None) tuples."""
    events = [EventRecord(*r) for r in rows]
    if window is None:
        t_hi = max((e.t for e in events), default=1.0) + 1.0
        window = Window(0.0, t_hi, 0.0, 1.0, 0.0, 1.0)
    return MarkedDataset(events, window, n_groups)


def planted_four_block_tox(seed=0, per=60, within=0.8, noise=0.01):
    """Four 5-substance signature blocks plus two mutually exclusive
    high-frequency common substances; the commons force merged topics to
    surface never-co-occurring top-term pairs."""
    rng = np.random.default_rng(seed)
    n_sub = 5
    n_drugs = 4 * n_sub + 2
    rows, ids, truth = [], [], []
    for b in range(4):
        for r in range(per):
            row = (rng.random(n_drugs) < noise).astype(float)
            blk = (rng.random(n_sub) < within).astype(float)
            if blk.sum() == 0:
                blk[0] = 1.0
            row[b * n_sub : (b + 1) * n_sub] = np.maximum(
                row[b * n_sub : (b + 1) * n_sub], blk
            )
            row[4 * n_sub + int(rng.random() < 0.5)] = 1.0
            rows.append(row)
            ids.append(f"r{b}_{r}")
            truth.append(b)
    names = [f"drug{d:02d}" for d in range(4 * n_sub)] + ["common_a", "common_b"]
    tox = ToxMatrix(matrix=np.array(rows).T, substances=names, report_ids=ids)
    return tox, np.array(truth)


def write_tox_csv(tox, path):
    with open(path, "w") as fh:
        fh.write("id," + ",".join(tox.substances) + "\n")
        for j, rid in enumerate(tox.report_ids):
            cells = ",".join(str(int(v)) for v in tox.matrix[:, j])
            fh.write(f"{rid},{cells}\n")


def labels_match_up_to_permutation(labels, truth, n_groups=4):
    """True when each predicted cluster maps 1-1 onto a planted block."""
    mapping = {}
    for k in range(n_groups):
        members = truth[labels == k]
        if members.size == 0:
            return False
        vals, counts = np.unique(members, return_counts=True)
        mapping[k] = int(vals[np.argmax(counts)])
    if len(set(mapping.values())) != n_groups:
        return False
    return all(mapping[int(l)] == int(t) for l, t in zip(labels, truth))


@pytest.fixture(scope="session")
def four_block_tox():
    return planted_four_block_tox(seed=0)
