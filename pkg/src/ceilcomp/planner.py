"""Feature-map inventory, ceiling plans, and CSV/SVG compression reports."""
import csv
import io
from dataclasses import asdict, dataclass, field

from .arch import count_params, load_arch, with_input
from .errors import InfeasibleCeilingError, ParameterError
from .network import STORED, classify_storage
from .projection import lift_consumer_report, overhead_check


@dataclass(frozen=True)
class InventoryEntry:
    site: str
    producer: str
    c: int
    m: int
    n: int
    elements: int
    storage_class: str
    classifier: bool  # vector activation (Dense / pooled head); never assigned a rank
    consumers: tuple = ()  # (name, foldable, p, c_o)

    @property
    def spatial(self):
        return self.m * self.n


@dataclass(frozen=True)
class FeatureMapInventory:
    entries: tuple
    input_shape: tuple
    arch_name: str = ""

    def max_elements(self):
        return max(e.elements for e in self.entries)

    def total_elements(self):
        return sum(e.elements for e in self.entries)

    def by_site(self):
        return {e.site: e for e in self.entries}


def profile(arch, input_shape=None):
    """Inventory of the Stored activations of ``arch`` (a description, network, or catalog name)."""
    if isinstance(arch, str):
        arch = load_arch(arch)
    if input_shape is not None and tuple(input_shape) != tuple(arch.input_shape):
        arch = with_input(arch, input_shape)
    entries = []
    for rec in classify_storage(arch):
        if rec.storage_class != STORED:
            continue
        if len(rec.shape) == 3:
            c, m, n = rec.shape
            classifier = False
        else:
            c, m, n = rec.shape[0], 1, 1
            classifier = True
        cons = tuple(lift_consumer_report(arch, rec.producer)) if not classifier else ()
        entries.append(InventoryEntry(rec.site, rec.producer, c, m, n, c * m * n, STORED, classifier, cons))
    return FeatureMapInventory(tuple(entries), tuple(arch.input_shape), arch.name)


def largest_fm_ratio(arch, input_shape=None):
    """Largest stored feature map divided by the pre-trained parameter count."""
    if isinstance(arch, str):
        arch = load_arch(arch)
    if input_shape is not None:
        arch = with_input(arch, input_shape)
    params = arch.declared_params if arch.declared_params is not None else count_params(arch)
    return profile(arch).max_elements() / params


# ---------------------------------------------------------------- ceiling plans


@dataclass
class CeilingPlan:
    ceiling_elements: int
    ceiling_factor: float
    assignments: dict          # site -> rank k
    predicted: dict            # site -> post-plan elements (every inventory entry)
    original: dict             # site -> original elements
    overall_compression: float
    param_delta: dict = field(default_factory=dict)  # site -> parameter element change
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _site_param_delta(entry, k):
    """Parameter change at one site and whether every lift folds without overhead."""
    c = entry.c
    delta = k * c  # S1 is always kept
    ok = True
    explicit = False
    for _, can_fold, p, c_o in entry.consumers:
        if can_fold:
            delta += p * p * c_o * (k - c)
            ok = ok and overhead_check(p, c_o, c, k)
        else:
            explicit = True
    if explicit:
        delta += c * k
        ok = False
    return delta, ok, explicit


def plan_ceiling(inv, ceiling_factor=None, ceiling_elements=None):
    """Assign the maximal rank ``k = floor(ceiling / (m*n))`` to every site above the ceiling."""
    if (ceiling_factor is None) == (ceiling_elements is None):
        raise ParameterError("give exactly one of ceiling_factor or ceiling_elements")
    biggest = inv.max_elements()
    if ceiling_factor is not None:
        if ceiling_factor <= 0:
            raise ParameterError(f"ceiling factor must be positive, got {ceiling_factor}")
        ceiling = int(biggest // ceiling_factor)
    else:
        ceiling = int(ceiling_elements)
    if ceiling < 1:
        raise ParameterError(f"ceiling must be at least one element, got {ceiling}")
    assignments, predicted, original, deltas, warnings = {}, {}, {}, {}, []
    blocking = []
    for e in inv.entries:
        original[e.site] = e.elements
        predicted[e.site] = e.elements
        if e.elements <= ceiling:
            continue
        k = ceiling // e.spatial
        if e.classifier or k == 0:
            blocking.append(e.site)
            continue
        k = min(k, e.c - 1)
        assignments[e.site] = k
        predicted[e.site] = k * e.spatial
        delta, ok, explicit = _site_param_delta(e, k)
        deltas[e.site] = delta
        if explicit:
            warnings.append(f"{e.site}: consumer cannot absorb the lift; explicit S2 kept ({e.c * k} elements)")
        if not ok and not explicit:
            warnings.append(f"{e.site}: k={k} fails the overhead bound; parameter delta +{delta}")
    if blocking:
        raise InfeasibleCeilingError(
            f"ceiling of {ceiling} elements is infeasible at: {', '.join(blocking)}", blocking
        )
    post = sum(predicted.values())
    return CeilingPlan(
        ceiling_elements=ceiling,
        ceiling_factor=biggest / ceiling,
        assignments=assignments,
        predicted=predicted,
        original=original,
        overall_compression=sum(original.values()) / post,
        param_delta=deltas,
        warnings=warnings,
    )


# ---------------------------------------------------------------- reports

CSV_COLUMNS = ("site", "c", "m", "n", "elements", "storage_class", "assigned_k", "compressed_elements")


def report_csv(inv, plan):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in inv.entries:
        k = plan.assignments.get(e.site, "")
        w.writerow([e.site, e.c, e.m, e.n, e.elements, e.storage_class, k, plan.predicted[e.site]])
    return buf.getvalue()


def report_svg(inv, plan, title=None, before=None, after=None):
    """Grouped bars (original pink, compressed blue) with a dotted ceiling line.

    ``before`` / ``after`` override the bar heights (site -> elements), which
    the before/after checkpoint report uses.
    """
    sites = [e.site for e in inv.entries]
    before = before or {e.site: e.elements for e in inv.entries}
    after = after or dict(plan.predicted)
    top = max(max(before.values()), plan.ceiling_elements)
    bar, gap, left, plot_h, base = 9, 6, 70, 260, 300
    width = left + len(sites) * (2 * bar + gap) + 80
    height = base + 150

    def y(v):
        return base - plot_h * v / top

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-size="13">{_esc(title or inv.arch_name)}: '
        f"ceiling {plan.ceiling_factor:.2f}x, overall {plan.overall_compression:.2f}x</text>",
        f'<line x1="{left}" y1="{base}" x2="{width - 70}" y2="{base}" stroke="black"/>',
        f'<line x1="{left}" y1="{base}" x2="{left}" y2="{base - plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = top * frac
        out.append(f'<text x="{left - 4}" y="{y(v) + 3:.1f}" text-anchor="end">{int(v):,}</text>')
    for i, site in enumerate(sites):
        x0 = left + gap / 2 + i * (2 * bar + gap)
        for j, (val, colour) in enumerate(((before[site], "#f4a3c0"), (after[site], "#4f7fd0"))):
            out.append(
                f'<rect x="{x0 + j * bar:.1f}" y="{y(val):.2f}" width="{bar}" '
                f'height="{base - y(val):.2f}" fill="{colour}"><title>{_esc(site)}: {val}</title></rect>'
            )
        tx = x0 + bar
        out.append(
            f'<text x="{tx:.1f}" y="{base + 8}" transform="rotate(60 {tx:.1f} {base + 8})">{_esc(site)}</text>'
        )
    cy = y(plan.ceiling_elements)
    out.append(
        f'<line x1="{left}" y1="{cy:.2f}" x2="{width - 70}" y2="{cy:.2f}" stroke="black" stroke-dasharray="2,3"/>'
    )
    out.append(f'<text x="{width - 66}" y="{cy + 3:.2f}">{plan.ceiling_factor:.1f}x</text>')
    out.append(f'<rect x="{width - 180}" y="28" width="10" height="10" fill="#f4a3c0"/>')
    out.append(f'<text x="{width - 166}" y="37">original</text>')
    out.append(f'<rect x="{width - 180}" y="44" width="10" height="10" fill="#4f7fd0"/>')
    out.append(f'<text x="{width - 166}" y="53">compressed</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def compression_report(inv, plan, fmt="csv"):
    if fmt == "csv":
        return report_csv(inv, plan)
    if fmt == "svg":
        return report_svg(inv, plan)
    raise ParameterError(f"unknown report format {fmt!r}; use csv or svg")
