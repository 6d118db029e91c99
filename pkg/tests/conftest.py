import time

import numpy as np
import pytest

from utiltune.core import ActionGrid, AdCandidate, CampaignType, GroupSpec
from utiltune.policy import ArchConfig, PolicyInputs
from utiltune.simenv import CategoricalSpec, DenseSpec, FeatureSchema, SimConfig, UserSegment, desk_segments

CT, CONV, IMP = CampaignType.CLICK_THROUGH, CampaignType.CONVERSION, CampaignType.IMPRESSION


def ad(campaign=CT, p_click=0.1, p_click30=0.05, p_conversion=0.01, bid=1.0, ad_id="x"):
    return AdCandidate(ad_id, campaign, p_click, p_click30, p_conversion, bid)


def small_grid(m=3) -> ActionGrid:
    return ActionGrid(
        groups=(GroupSpec("click", ("w_click", "w_click30"), 0.0, 1.0), GroupSpec("conversion", ("w_conversion",), 0.0, 2.0)),
        values_per_group=m,
        reserve=GroupSpec("reserve", (), 0.0, 0.4),
    )


def tiny_schema() -> FeatureSchema:
    return FeatureSchema((CategoricalSpec("a", 4), CategoricalSpec("b", 4)), ("x", "y"), (DenseSpec("d", 2),))


def tiny_inputs(schema: FeatureSchema, n: int, seed: int = 0) -> PolicyInputs:
    g = np.random.default_rng(seed)
    cat = np.stack([g.integers(0, c, n) for c in schema.cardinalities], axis=1)
    return PolicyInputs(cat, g.normal(size=(n, len(schema.numerical_names))), g.normal(size=(n, schema.dense_width)))


@pytest.fixture
def grid3():
    return small_grid(3)


@pytest.fixture
def schema():
    return tiny_schema()


@pytest.fixture
def small_arch():
    return ArchConfig(embed_dim=4, hidden=(16,))


@pytest.fixture
def sim():
    return SimConfig(seed=3, segments=desk_segments(), exploration_fraction=100, exploration_cap=100)


@pytest.fixture
def one_segment():
    return SimConfig(seed=1, segments=(UserSegment(0, 0.1, 0.05, 0.01),), exploration_fraction=100, exploration_cap=100)



def _relu_pattern(net, inputs):
    net.logits(inputs, "train", update_running=False)
    return [blk[3] > 0 for blk in net._cache.blocks]


def finite_difference_check(net, inputs, actions, weights, eps=1e-3, n_coords=200, seed=0):
    """Central differences on random coordinates of a float64 copy of ``net``.

    A coordinate whose +/-eps step flips any ReLU on the batch sits on a kink
    where the two-sided quotient is not a derivative; those are skipped.
    Returns (max relative error, coordinates compared, coordinates skipped).
    """
    from utiltune.policy import loss

    net64 = net.astype(np.float64)
    base = _relu_pattern(net64, inputs)
    net64.forward(inputs, "train", update_running=False)
    analytic = net64.backward(inputs, actions, weights)
    coords = [(name, k) for name, p in net64.params.items() for k in range(p.size)]
    pick = np.random.default_rng(seed).choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst, used, skipped = 0.0, 0, 0
    for j in pick:
        name, k = coords[j]
        flat = net64.params[name].reshape(-1)
        old = flat[k]
        values, kink = [], False
        for delta in (eps, -eps):
            flat[k] = old + delta
            kink |= any((a != b).any() for a, b in zip(base, _relu_pattern(net64, inputs)))
            values.append(loss(net64, inputs, actions, weights))
        flat[k] = old
        if kink:
            skipped += 1
            continue
        num = (values[0] - values[1]) / (2 * eps)
        a = analytic[name].reshape(-1)[k]
        scale = max(abs(a), abs(num))
        worst = max(worst, abs(a - num) / scale if scale > 1e-10 else 0.0)
        used += 1
    return worst, used, skipped


# --- shared desk-scale artifacts ------------------------------------------

DESK_LOG_REQUESTS = 50_000
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def desk_config():
    from utiltune.config import parse_config, preset

    return parse_config(preset("desk"))


@pytest.fixture(scope="session")
def desk_log(desk_config, tmp_path_factory):
    """50k uniform-exploration requests from the desk preset, written and read back."""
    from utiltune.logfile import read_log, write_log
    from utiltune.simenv import collect

    t0 = time.perf_counter()
    sim, grid = desk_config.sim_config(), desk_config.action_grid()
    path = tmp_path_factory.mktemp("desk") / "log.jsonl"
    write_log(path, collect(sim, grid, desk_config.behavior_policy("uniform"), DESK_LOG_REQUESTS), sim.schema(), grid)
    out = path, read_log(path, sim.schema())
    TIMINGS["desk_log"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def desk_trained(desk_config, desk_log):
    from utiltune.train import train_on_data

    _, data = desk_log
    t0 = time.perf_counter()
    sim = desk_config.sim_config()
    out = train_on_data(data, desk_config.action_grid(), sim.schema(), desk_config.train_config())
    TIMINGS["desk_trained"] = time.perf_counter() - t0
    return out


def wire_constant(net, action: int, margin: float = 50.0):
    """Make ``net`` put (almost) all mass on one flat action for every state."""
    net.params["out.W"][...] = 0
    net.params["out.b"][...] = 0
    net.params["out.b"][action] = margin
    return net


def wire_uniform(net):
    net.params["out.W"][...] = 0
    net.params["out.b"][...] = 0
    return net


# --- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    notes = [v for k, v in item.user_properties if k == "detail"]
    _CRITERIA.setdefault(n, [title, True, []])
    entry = _CRITERIA[n]
    entry[1] = entry[1] and rep.passed
    entry[2].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[n]
        extra = f"  [{'; '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"criterion {n} {title}: {'PASS' if ok else 'FAIL'}{extra}")
