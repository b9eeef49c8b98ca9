"""Blocks, polymers, closures, neighbourhoods, the pi/chi assignment and
constrained preimage enumeration.

Polymers at scale k are bitmasks over the k-block lattice (blocks of side
L**k, translates of the centered cube).  Everything here is pure combinatorics
on those bitmasks; fields never enter.

The small-component block assignment (pi-tilde) uses the lexicographically
smallest site of the component, computed on the connected unwrapped lift of
the component rather than on raw canonical coordinates.  For components that
do not straddle the canonical cut the two notions coincide; the lift makes the
rule covariant under block-lattice translations (which raw canonical
coordinates are not, on a torus).
"""

from dataclasses import dataclass
from functools import lru_cache
import itertools

import numpy as np

from .lattice import TorusParams


class PolymerError(ValueError):
    pass


class EnumerationBudgetError(RuntimeError):
    """Raised when constrained enumeration exceeds its configured node budget."""


@lru_cache(maxsize=None)
def block_lattice(torus: TorusParams, k: int):
    return BlockLattice(torus, k)


class BlockLattice:
    """Indexing of the scale-k block lattice of a torus."""

    def __init__(self, torus, k):
        if k < 0 or k > torus.N:
            raise PolymerError(f"scale {k} outside 0..N={torus.N}")
        self.torus = torus
        self.k = k
        self.block_side = torus.L ** k
        self.nb_side = torus.L ** (torus.N - k)
        self.nblocks = self.nb_side ** torus.d
        self.half = (self.nb_side - 1) // 2
        d = torus.d
        axes = [np.arange(self.nb_side) - self.half for _ in range(d)]
        grid = np.meshgrid(*axes, indexing="ij")
        # block coordinates in units of L^k (centers are block_side * coord)
        self.coords = np.stack([g.ravel() for g in grid], axis=-1)
        self._neighbour_masks = None
        self._site_lists = None

    def index_of(self, bcoords):
        bcoords = np.asarray(bcoords)
        shifted = np.mod(bcoords + self.half, self.nb_side)
        return np.ravel_multi_index(tuple(np.moveaxis(shifted, -1, 0)),
                                    (self.nb_side,) * self.torus.d)

    def block_of_site(self, site_coords):
        """Block coordinate (units of L^k) containing given site coordinates."""
        h = (self.block_side - 1) // 2
        c = np.floor_divide(np.asarray(site_coords) + h, self.block_side)
        return np.mod(c + self.half, self.nb_side) - self.half

    def sites_of_block(self, bi):
        if self._site_lists is None:
            coords = self.torus.coords_array()
            owner = self.index_of(self.block_of_site(coords))
            order = np.argsort(owner, kind="stable")
            sorted_sites = np.arange(self.torus.nsites)[order]
            counts = np.bincount(owner, minlength=self.nblocks)
            splits = np.cumsum(counts)[:-1]
            self._site_lists = np.split(sorted_sites, splits)
        return self._site_lists[bi]

    def neighbour_mask(self, bi):
        """Bitmask of blocks at inf-distance exactly 1 (torus metric)."""
        if self._neighbour_masks is None:
            d = self.torus.d
            masks = []
            offsets = [o for o in itertools.product((-1, 0, 1), repeat=d) if any(o)]
            for b in range(self.nblocks):
                m = 0
                for o in offsets:
                    m |= 1 << int(self.index_of(self.coords[b] + np.asarray(o)))
                m &= ~(1 << b)
                masks.append(m)
            self._neighbour_masks = masks
        return self._neighbour_masks[bi]

    def shift_perm(self, bvec):
        """Permutation p with translate(X)'s blocks = {p[b] : b in X}."""
        return self.index_of(self.coords + np.asarray(bvec))

    def parent_lattice(self):
        return block_lattice(self.torus, self.k + 1)

    def parent_of(self, bi):
        """Index (at scale k+1) of the block containing block bi."""
        pl = self.parent_lattice()
        center = self.coords[bi] * self.block_side
        return int(pl.index_of(pl.block_of_site(center)))


def bits_of(blocks):
    m = 0
    for b in blocks:
        m |= 1 << int(b)
    return m


def blocks_of(bits):
    out = []
    b = bits
    while b:
        low = b & -b
        out.append(low.bit_length() - 1)
        b ^= low
    return out


@dataclass(frozen=True)
class Polymer:
    """A union of k-blocks, stored as a bitmask over the block lattice."""

    lattice: BlockLattice
    bits: int

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.lattice.nblocks:
            raise PolymerError("bitmask outside block lattice")

    @property
    def k(self):
        return self.lattice.k

    @property
    def size(self):
        return self.bits.bit_count()

    def block_indices(self):
        return blocks_of(self.bits)

    def is_empty(self):
        return self.bits == 0

    def union(self, other):
        return Polymer(self.lattice, self.bits | other.bits)

    def difference(self, other):
        return Polymer(self.lattice, self.bits & ~other.bits)

    def contains(self, other):
        return other.bits & ~self.bits == 0

    def sites(self):
        """Sorted site indices covered by the polymer."""
        if self.bits == 0:
            return np.empty(0, dtype=int)
        parts = [self.lattice.sites_of_block(b) for b in self.block_indices()]
        return np.sort(np.concatenate(parts))

    def site_mask(self):
        m = np.zeros(self.lattice.torus.nsites, dtype=bool)
        m[self.sites()] = True
        return m

    def translate(self, bvec):
        perm = self.lattice.shift_perm(bvec)
        return Polymer(self.lattice, bits_of(perm[b] for b in self.block_indices()))

    def anchor(self):
        """Lex-smallest block coordinate (ties impossible)."""
        if self.bits == 0:
            return np.zeros(self.lattice.torus.d, dtype=int)
        cs = self.lattice.coords[self.block_indices()]
        order = np.lexsort(cs.T[::-1])
        return cs[order[0]].copy()

    def normalized_bits(self):
        """Bits after translating the anchor block to the origin (shape key)."""
        if self.bits == 0:
            return 0
        return self.translate(-self.anchor()).bits

    def debug_format(self):
        """Sorted list of block base coordinates as a JSON-style array."""
        cs = self.lattice.coords[self.block_indices()] * self.lattice.block_side
        rows = sorted(tuple(int(x) for x in c) for c in cs)
        return "[" + ", ".join("[" + ", ".join(str(x) for x in r) + "]" for r in rows) + "]"


def empty_polymer(lattice):
    return Polymer(lattice, 0)


def whole_torus(lattice):
    return Polymer(lattice, (1 << lattice.nblocks) - 1)


def single_block(lattice, bi):
    return Polymer(lattice, 1 << int(bi))


# -- connectivity, closure, classification ---------------------------------

def connected_components(X: Polymer):
    """Maximal inf-norm-connected pieces, as polymers, in deterministic order."""
    lat = X.lattice
    remaining = X.bits
    comps = []
    while remaining:
        seed = remaining & -remaining
        comp = seed
        frontier = seed
        while frontier:
            grow = 0
            f = frontier
            while f:
                low = f & -f
                grow |= lat.neighbour_mask(low.bit_length() - 1)
                f ^= low
            grow &= remaining & ~comp
            comp |= grow
            frontier = grow
        comps.append(Polymer(lat, comp))
        remaining &= ~comp
    return comps


def closure(X: Polymer):
    """Smallest (k+1)-polymer containing X."""
    lat = X.lattice
    if lat.k + 1 > lat.torus.N:
        raise PolymerError("closure would exceed the top scale")
    pl = lat.parent_lattice()
    return Polymer(pl, bits_of(lat.parent_of(b) for b in X.block_indices()))


def components_and_closure(X: Polymer):
    return connected_components(X), closure(X)


def classify_small(X: Polymer):
    """'small' iff connected with at most 2^d blocks; disconnected input rejected."""
    if X.is_empty() or len(connected_components(X)) != 1:
        raise PolymerError("classification requires a connected, non-empty polymer")
    return "small" if X.size <= 2 ** X.lattice.torus.d else "large"


# -- neighbourhoods ---------------------------------------------------------

def hat_cube(lattice, bi):
    """B-hat: cube of side (2^{d+1}+1) L^k centered at block bi, wrapped on the torus."""
    d = lattice.torus.d
    reach = 2 ** d
    c = lattice.coords[bi]
    offs = itertools.product(range(-reach, reach + 1), repeat=d)
    return Polymer(lattice, bits_of({int(lattice.index_of(c + np.asarray(o))) for o in offs}))


def plus_neighbourhood(X: Polymer):
    """X^+ : X together with all touching k-blocks."""
    lat = X.lattice
    m = X.bits
    for b in X.block_indices():
        m |= lat.neighbour_mask(b)
    return Polymer(lat, m)


def star_neighbourhood(X: Polymer):
    """X^* : union of B-hat over the (k-1)-blocks of X (k-blocks for k = 0)."""
    lat = X.lattice
    sub = block_lattice(lat.torus, max(lat.k - 1, 0))
    if lat.k == 0:
        members = X.block_indices()
    else:
        members = []
        for b in X.block_indices():
            members.extend(sub_children(lat, sub, b))
    m = 0
    for b in members:
        m |= hat_cube(sub, b).bits
    return Polymer(sub, m)


@lru_cache(maxsize=None)
def _children_table(torus, k):
    lat = block_lattice(torus, k)
    sub = block_lattice(torus, k - 1)
    table = [[] for _ in range(lat.nblocks)]
    for b in range(sub.nblocks):
        table[sub.parent_of(b)].append(b)
    return table


def sub_children(lat, sub, bi):
    return _children_table(lat.torus, lat.k)[bi]


def neighbourhoods(X: Polymer):
    """(X^* at scale k-1, X^+ at scale k, B-hat per block of X)."""
    hats = {b: hat_cube(X.lattice, b) for b in X.block_indices()}
    return star_neighbourhood(X), plus_neighbourhood(X), hats


# -- the pi / chi assignment -------------------------------------------------

def _lifted_coords(comp: Polymer):
    """Unwrapped block coordinates of a connected polymer (BFS from anchor).

    Deterministic; for components small enough not to wind around the torus
    the lift is exact (path independent).
    """
    lat = comp.lattice
    nb = lat.nb_side
    members = comp.block_indices()
    cs = {b: lat.coords[b] for b in members}
    order = sorted(members, key=lambda b: tuple(cs[b]))
    root = order[0]
    lifted = {root: cs[root].astype(int)}
    frontier = [root]
    member_set = set(members)
    while frontier:
        frontier.sort()
        nxt = []
        for a in frontier:
            for b in sorted(blocks_of(lat.neighbour_mask(a))):
                if b in member_set and b not in lifted:
                    delta = cs[b] - cs[a]
                    delta = (delta + nb // 2) % nb - nb // 2  # minimal displacement
                    lifted[b] = lifted[a] + delta
                    nxt.append(b)
        frontier = nxt
    return lifted


def pi_tilde(comp: Polymer):
    """Assigned (k+1)-block of one connected component (empty -> empty)."""
    lat = comp.lattice
    pl = lat.parent_lattice()
    if comp.is_empty():
        return empty_polymer(pl)
    if comp.size > 2 ** lat.torus.d:
        return closure(comp)
    lifted = _lifted_coords(comp)
    bmin = min(lifted.values(), key=tuple)
    corner = bmin * lat.block_side - (lat.block_side - 1) // 2  # lex-min site, lifted
    h = (pl.block_side - 1) // 2
    pcoord = np.floor_divide(corner + h, pl.block_side)
    pcoord = np.mod(pcoord + pl.half, pl.nb_side) - pl.half
    return single_block(pl, int(pl.index_of(pcoord)))


def pi_map(X: Polymer):
    """pi(X): union of pi-tilde over connected components."""
    pl = X.lattice.parent_lattice()
    m = 0
    for comp in connected_components(X):
        m |= pi_tilde(comp).bits
    return Polymer(pl, m)


def pi_chi(X: Polymer, U: Polymer):
    """(pi(X), chi(X, U))."""
    if U.lattice.k != X.lattice.k + 1 or U.lattice.torus is not X.lattice.torus:
        raise PolymerError("U must live one scale above X on the same torus")
    p = pi_map(X)
    return p, 1 if p.bits == U.bits else 0


# -- constrained preimage enumeration ----------------------------------------

_DEFAULT_BUDGET = 5_000_000


def enumerate_preimage(U: Polymer, size_cutoff, budget=_DEFAULT_BUDGET):
    """All X at scale k with chi(X, U) = 1 and |X|_k <= size_cutoff.

    Deterministic order (sorted block-index tuples).  Raises
    EnumerationBudgetError when the search tree exceeds ``budget`` nodes.
    """
    if size_cutoff < 0:
        raise PolymerError("size_cutoff must be >= 0")
    if U.lattice.k < 1:
        raise PolymerError("U must live at scale >= 1")
    lat = block_lattice(U.lattice.torus, U.lattice.k - 1)
    if U.is_empty():
        return [empty_polymer(lat)]
    if size_cutoff == 0:
        return []
    key = (U.lattice.torus, U.lattice.k, int(U.normalized_bits()), int(size_cutoff))
    shift = U.anchor()
    cached = _preimage_shape_cache.get(key)
    if cached is None:
        Unorm = U.translate(-shift)
        cached = tuple(p.bits for p in _enumerate_preimage_raw(Unorm, size_cutoff, budget))
        _preimage_shape_cache[key] = cached
    sub_shift = shift * U.lattice.torus.L  # parent block units -> child block units
    perm = lat.shift_perm(sub_shift)
    out = [Polymer(lat, bits_of(perm[b] for b in blocks_of(bits))) for bits in cached]
    out.sort(key=lambda p: tuple(p.block_indices()))
    return out


_preimage_shape_cache = {}


def _enumerate_preimage_raw(U, size_cutoff, budget):
    lat = block_lattice(U.lattice.torus, U.lattice.k - 1)
    if lat.nblocks <= 16:
        return _preimage_by_scan(U, size_cutoff, lat)
    return _preimage_constructive(U, size_cutoff, lat, budget)


def _preimage_by_scan(U, size_cutoff, lat):
    """Reference path: brute scan of the full power set (small lattices only)."""
    out = []
    for bits in range(1, 1 << lat.nblocks):
        if bits.bit_count() > size_cutoff:
            continue
        X = Polymer(lat, bits)
        if pi_map(X).bits == U.bits:
            out.append(X)
    out.sort(key=lambda p: tuple(p.block_indices()))
    return out


def _connected_subsets_from_root(lat, root, universe_bits, max_size, counter, budget):
    """Connected subsets S with min(S) = root, S subset of universe, |S| <= max_size.

    Breadth-first growth with bitmask dedup; every such subset arises by
    repeatedly deleting a non-root leaf of a spanning tree, so growth from the
    root over indices > root reaches all of them.
    """
    above_root = ~((1 << (root + 1)) - 1)
    start = 1 << root
    seen = {start}
    frontier = [start]
    for _ in range(max_size - 1):
        nxt = []
        for bits in frontier:
            ext = 0
            rem = bits
            while rem:
                low = rem & -rem
                rem ^= low
                ext |= lat.neighbour_mask(low.bit_length() - 1)
            ext &= universe_bits & above_root & ~bits
            while ext:
                low = ext & -ext
                ext ^= low
                nb = bits | low
                counter[0] += 1
                if counter[0] > budget:
                    raise EnumerationBudgetError(f"enumeration exceeded {budget} nodes")
                if nb not in seen:
                    seen.add(nb)
                    nxt.append(nb)
        frontier = nxt
    return sorted(seen)


def _preimage_constructive(U, size_cutoff, lat, budget):
    torus = lat.torus
    d = torus.d
    two_d = 2 ** d
    counter = [0]
    targets = U.block_indices()
    target_mask_at = {t: 1 << t for t in targets}
    u_mask = U.bits

    children = {t: sub_children(U.lattice, lat, t) for t in targets}

    # -- small-component candidates, grouped by assigned target -------------
    small_max = min(two_d, size_cutoff)
    candidates = []  # (bits, touch, image_mask, size)
    seen = set()
    for t in targets:
        pool = 0
        for c in children[t]:
            pool |= (1 << c) | _ball_mask(lat, c, small_max - 1)
        for root in sorted(blocks_of(pool)):
            if lat.parent_of(root) != t:
                continue  # lex-min block of a small component sits inside its target
            for bits in _connected_subsets_from_root(lat, root, pool, small_max,
                                                     counter, budget):
                if bits in seen:
                    continue
                seen.add(bits)
                comp = Polymer(lat, bits)
                pt = pi_tilde(comp)
                if pt.bits & ~u_mask:
                    continue
                candidates.append((bits, _touch_mask(lat, bits), pt.bits,
                                   bits.bit_count()))

    # -- large-component candidates -----------------------------------------
    if size_cutoff > two_d:
        universe = 0
        for t in targets:
            for c in children[t]:
                universe |= 1 << c
        for root in sorted(blocks_of(universe)):
            for bits in _connected_subsets_from_root(lat, root, universe, size_cutoff,
                                                     counter, budget):
                if bits.bit_count() <= two_d or bits in seen:
                    continue
                seen.add(bits)
                comp = Polymer(lat, bits)
                img = closure(comp).bits
                candidates.append((bits, _touch_mask(lat, bits), img, bits.bit_count()))

    candidates.sort(key=lambda c: (c[0].bit_length(), c[0]))

    # -- assemble pairwise non-touching collections covering U ---------------
    results = []
    ncand = len(candidates)

    def assemble(start, used, touched, image, size_left):
        counter[0] += 1
        if counter[0] > budget:
            raise EnumerationBudgetError(f"enumeration exceeded {budget} nodes")
        if image == u_mask:
            results.append(used)
        uncovered = (u_mask & ~image).bit_count()
        if uncovered > size_left:
            return
        for i in range(start, ncand):
            bits, touch, img, size = candidates[i]
            if size > size_left or (bits & touched) or (bits & used):
                continue
            assemble(i + 1, used | bits, touched | touch | bits, image | img,
                     size_left - size)

    assemble(0, 0, 0, 0, size_cutoff)
    out = [Polymer(lat, b) for b in sorted(set(results))]
    out.sort(key=lambda p: tuple(p.block_indices()))
    return out


def _touch_mask(lat, bits):
    m = bits
    for b in blocks_of(bits):
        m |= lat.neighbour_mask(b)
    return m


@lru_cache(maxsize=None)
def _ball_cache(torus, k, center, radius):
    lat = block_lattice(torus, k)
    d = torus.d
    c = lat.coords[center]
    m = 0
    for o in itertools.product(range(-radius, radius + 1), repeat=d):
        m |= 1 << int(lat.index_of(c + np.asarray(o)))
    return m


def _ball_mask(lat, center, radius):
    if radius <= 0:
        return 1 << center
    return _ball_cache(lat.torus, lat.k, int(center), int(radius))
