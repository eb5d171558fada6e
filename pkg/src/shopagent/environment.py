"""Miniature goal-conditioned shopping world.

A page-based state machine (search -> results -> item -> item sub-pages)
over a synthetic catalog.  Every page exposes its own set of legal actions;
the only reward is paid on "buy now" and measures how well the purchased
product matches the instruction.
"""
from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, IllegalActionError
from .tokenizer import Vocabulary, tokenize

TEMPLATE_VERSION = 1
DEFAULT_HORIZON = 30
RESULTS_PER_PAGE = 5
MAX_QUERY_TOKENS = 8

# --- versioned catalog templates -------------------------------------------

OPTION_VALUES: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "black", "white", "green"),
    "size": ("small", "medium", "large", "xlarge"),
    "shade": ("ivory", "beige", "tan", "mocha"),
    "volume": ("30ml", "50ml", "100ml"),
    "scent": ("lavender", "citrus", "vanilla", "rose"),
    "length": ("25ft", "50ft", "75ft", "100ft"),
    "weight": ("8oz", "16oz", "32oz"),
    "flavor": ("cherry", "lemon", "cocoa", "honey"),
    "count": ("6count", "12count", "24count"),
    "storage": ("32gb", "64gb", "128gb", "256gb"),
    "material": ("cotton", "wool", "linen", "denim"),
}

CATEGORY_TEMPLATES: dict[str, dict[str, tuple]] = {
    "beauty": {
        "types": ("face cream", "shampoo", "lip balm", "nail polish", "eye shadow"),
        "attributes": ("hydrating", "vegan", "crueltyfree", "parabenfree", "unscented",
                       "sulfatefree", "matte", "glossy", "longwear", "nourishing",
                       "soothing", "antiaging"),
        "options": ("shade", "volume", "scent"),
        "brands": ("lumina", "velvee", "aurabloom", "skinora", "glowell", "purelle"),
    },
    "garden": {
        "types": ("garden hose", "flower planter", "hand shovel", "lawn sprinkler",
                  "plant fertilizer"),
        "attributes": ("weatherproof", "rustproof", "expandable", "ceramic", "galvanized",
                       "heavyduty", "frostresistant", "drainage", "ergonomic",
                       "biodegradable", "uvresistant", "foldable"),
        "options": ("color", "length", "weight"),
        "brands": ("greenhaven", "terrafix", "rootwise", "yardly", "bloomcraft", "soilsmith"),
    },
    "grocery": {
        "types": ("green tea", "trail mix", "olive oil", "dark chocolate", "protein bar"),
        "attributes": ("organic", "glutenfree", "kosher", "sugarfree", "lowsodium", "nongmo",
                       "keto", "roasted", "unsalted", "caffeinefree", "wholegrain",
                       "coldpressed"),
        "options": ("flavor", "weight", "count"),
        "brands": ("harvestco", "nutrio", "fieldsweet", "grainly", "orchardia", "tastewell"),
    },
    "electronics": {
        "types": ("wireless earbuds", "phone charger", "bluetooth speaker", "usb cable",
                  "smart watch"),
        "attributes": ("noisecancelling", "fastcharging", "portable", "rechargeable",
                       "usbc", "waterresistant", "compact", "hifi", "braided",
                       "touchscreen", "magnetic", "dualband"),
        "options": ("color", "storage"),
        "brands": ("voltix", "sonique", "zentech", "ampora", "circuitra", "nexio"),
    },
    "fashion": {
        "types": ("running shoes", "denim jacket", "wool sweater", "leather belt",
                  "summer dress"),
        "attributes": ("slimfit", "breathable", "machinewash", "handmade", "stretchy",
                       "lightweight", "vintage", "waterproof", "casual", "formal",
                       "insulated", "quickdry"),
        "options": ("color", "size", "material"),
        "brands": ("threadly", "urbanite", "nordvik", "stitchco", "velora", "tailorly"),
    },
}
SHARED_ATTRIBUTES = ("premium", "bestseller")
SHARED_ATTRIBUTE_PROB = 0.15
MIN_UNIQUE_FRACTION = 0.85

PRICE_CAP_STEP = 5
PRICE_CAP_TOKENS = tuple(str(v) for v in range(PRICE_CAP_STEP, 305, PRICE_CAP_STEP))
GOAL_TEMPLATE = "i am looking for {attributes} {ptype}{options} and price lower than {cap} dollars"
TEMPLATE_WORDS = tokenize(
    "webshop instruction search results page of query price item options selected "
    "description features reviews rated stars from store a with and i am looking for "
    "lower than dollars no products found")

SATISFIABLE_PRICE_PROB = 0.9


class PageKind(str, enum.Enum):
    SEARCH = "search"
    RESULTS = "results"
    ITEM = "item"
    ITEM_SUB = "item_sub"


class SubKind(str, enum.Enum):
    DESCRIPTION = "description"
    FEATURES = "features"
    REVIEWS = "reviews"


class ActionKind(str, enum.Enum):
    SEARCH_QUERY = "search_query"
    CLICK = "click"


@dataclass(frozen=True)
class ActionSpec:
    kind: ActionKind
    surface: tuple[str, ...]

    def __str__(self) -> str:
        text = " ".join(self.surface)
        return f"search[{text}]" if self.kind is ActionKind.SEARCH_QUERY else f"click[{text}]"


def click(label: str) -> ActionSpec:
    return ActionSpec(ActionKind.CLICK, tokenize(label))


def query(tokens: Sequence[str]) -> ActionSpec:
    return ActionSpec(ActionKind.SEARCH_QUERY, tuple(tokens))


# The open query slot offered on the search page; its surface is filled in by
# the policy before the action is executed.
QUERY_SLOT = ActionSpec(ActionKind.SEARCH_QUERY, ())
SEARCH = click("Search")
BACK_TO_SEARCH = click("Back to Search")
NEXT = click("Next >")
PREV = click("< Prev")
DESCRIPTION = click("Description")
FEATURES = click("Features")
REVIEWS = click("Reviews")
BUY_NOW = click("Buy Now")
BUTTON_LABELS = (SEARCH, BACK_TO_SEARCH, NEXT, PREV, DESCRIPTION, FEATURES, REVIEWS, BUY_NOW)
_SUB_BUTTONS = {DESCRIPTION: SubKind.DESCRIPTION, FEATURES: SubKind.FEATURES,
                REVIEWS: SubKind.REVIEWS}


@dataclass(frozen=True)
class Product:
    id: int
    category: str
    title: tuple[str, ...]
    product_type: tuple[str, ...]
    attributes: frozenset[str]
    options: Mapping[str, tuple[str, ...]]
    price: float

    def __post_init__(self):
        if not self.attributes:
            raise ContractViolation(f"product {self.id} has no attributes")
        if any(len(v) == 0 for v in self.options.values()):
            raise ContractViolation(f"product {self.id} has an option without values")
        if not set(self.product_type) <= set(self.title):
            raise ContractViolation(f"product {self.id}: type tokens missing from title")
        if self.price < 0:
            raise ContractViolation(f"product {self.id}: negative price")

    def __hash__(self) -> int:
        return hash(self.id)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "title": list(self.title),
            "product_type": list(self.product_type),
            "attributes": sorted(self.attributes),
            "options": {k: list(v) for k, v in self.options.items()},
            "price": self.price,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Product":
        return cls(
            id=int(rec["id"]),
            category=rec["category"],
            title=tuple(rec["title"]),
            product_type=tuple(rec["product_type"]),
            attributes=frozenset(rec["attributes"]),
            options={k: tuple(v) for k, v in rec["options"].items()},
            price=float(rec["price"]),
        )


@dataclass(frozen=True)
class Catalog:
    products: tuple[Product, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        ids = [p.id for p in self.products]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate product ids in catalog")
        object.__setattr__(self, "_by_id", {p.id: p for p in self.products})

    def __len__(self) -> int:
        return len(self.products)

    def get(self, product_id: int) -> Product:
        return self._by_id[product_id]

    def in_category(self, category: str) -> list[Product]:
        return [p for p in self.products if p.category == category]

    def unique_attribute_fraction(self, category: str) -> float:
        own = set().union(*(p.attributes for p in self.in_category(category)))
        others = set().union(*(p.attributes for p in self.products if p.category != category))
        return len(own - others) / len(own)

    def vocabulary_tokens(self) -> list[tuple[str, ...]]:
        streams = []
        for p in self.products:
            streams.append(p.title)
            streams.append(tuple(p.attributes))
            streams.append(tokenize(f"{p.price:.2f}"))
            for name, values in p.options.items():
                streams.append((name, *values))
        streams.append(tuple(self.categories))
        return streams

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"categories": list(self.categories)}) + "\n")
            for p in self.products:
                fh.write(json.dumps(p.to_record()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            products = tuple(Product.from_record(json.loads(line)) for line in fh if line.strip())
        return cls(products=products, categories=tuple(header["categories"]))


@dataclass(frozen=True)
class Instruction:
    goal_text: tuple[str, ...]
    required_attributes: frozenset[str]
    required_options: Mapping[str, str]
    price_cap: float
    target_type: tuple[str, ...]
    source_category: str
    target_id: int
    goal_id: str = ""

    def __post_init__(self):
        if not self.required_attributes:
            raise ContractViolation("instruction needs at least one required attribute")
        if self.price_cap <= 0:
            raise ContractViolation("price cap must be positive")

    def __hash__(self) -> int:
        return hash((self.goal_id, self.goal_text))

    def to_record(self) -> dict:
        return {
            "goal_id": self.goal_id,
            "goal_text": list(self.goal_text),
            "required_attributes": sorted(self.required_attributes),
            "required_options": dict(self.required_options),
            "price_cap": self.price_cap,
            "target_type": list(self.target_type),
            "source_category": self.source_category,
            "target_id": self.target_id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Instruction":
        return cls(
            goal_text=tuple(rec["goal_text"]),
            required_attributes=frozenset(rec["required_attributes"]),
            required_options=dict(rec["required_options"]),
            price_cap=float(rec["price_cap"]),
            target_type=tuple(rec["target_type"]),
            source_category=rec["source_category"],
            target_id=int(rec["target_id"]),
            goal_id=rec.get("goal_id", ""),
        )


def save_instructions(instructions: Iterable[Instruction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ins in instructions:
            fh.write(json.dumps(ins.to_record()) + "\n")


def load_instructions(path: str | Path) -> list[Instruction]:
    with open(path, encoding="utf-8") as fh:
        return [Instruction.from_record(json.loads(line)) for line in fh if line.strip()]


def template_tokens() -> list[tuple[str, ...]]:
    """Every token the templates and buttons can emit, independent of any catalog."""
    streams = [TEMPLATE_WORDS, PRICE_CAP_TOKENS]
    streams += [b.surface for b in BUTTON_LABELS]
    for name, values in OPTION_VALUES.items():
        streams.append((name, *values))
    for cat, tpl in CATEGORY_TEMPLATES.items():
        streams.append((cat,))
        streams.append(tpl["attributes"])
        streams.append(tpl["brands"])
        for t in tpl["types"]:
            streams.append(tokenize(t))
    streams.append(SHARED_ATTRIBUTES)
    streams.append(tuple(str(s) for s in range(1, 6)))
    return streams


def build_vocabulary(catalog: Catalog) -> Vocabulary:
    """Closed vocabulary covering the catalog and every template token."""
    return Vocabulary.build([*catalog.vocabulary_tokens(), *template_tokens()])


# --- catalog generation -----------------------------------------------------

def _category_template(index: int) -> tuple[str, dict[str, tuple]]:
    names = list(CATEGORY_TEMPLATES)
    if index < len(names):
        return names[index], CATEGORY_TEMPLATES[names[index]]
    # Synthetic categories beyond the five named ones.
    tag = f"kind{index}"
    return tag, {
        "types": tuple(f"{tag}item{j}" for j in range(5)),
        "attributes": tuple(f"{tag}attr{j}" for j in range(12)),
        "options": ("color", "size"),
        "brands": tuple(f"{tag}brand{j}" for j in range(6)),
    }


def generate_catalog(seed: int, n_products: int, n_categories: int) -> Catalog:
    """Deterministic synthetic catalog with mostly category-private attributes."""
    if n_products <= 0:
        raise ContractViolation("n_products must be positive")
    if not 1 <= n_categories <= n_products:
        raise ContractViolation("need n_products >= n_categories >= 1")
    rng = np.random.default_rng([TEMPLATE_VERSION, seed])
    templates = [_category_template(c) for c in range(n_categories)]
    private: dict[str, set[str]] = {name: set() for name, _ in templates}
    shared: dict[str, set[str]] = {name: set() for name, _ in templates}
    titles: set[tuple[str, ...]] = set()
    products = []
    for pid in range(n_products):
        cat, tpl = templates[pid % n_categories]
        ptype = tokenize(tpl["types"][rng.integers(len(tpl["types"]))])
        n_attr = int(rng.integers(2, 5))
        attrs = [str(a) for a in rng.choice(tpl["attributes"], size=n_attr, replace=False)]
        private[cat].update(attrs)
        if rng.random() < SHARED_ATTRIBUTE_PROB:
            extra = SHARED_ATTRIBUTES[rng.integers(len(SHARED_ATTRIBUTES))]
            n_priv = len(private[cat])
            n_shared = len(shared[cat] | {extra})
            if n_priv / (n_priv + n_shared) >= MIN_UNIQUE_FRACTION:
                shared[cat].add(extra)
                attrs.append(extra)
        brands = list(tpl["brands"])
        start = int(rng.integers(len(brands)))
        title = None
        for k in range(len(brands)):
            candidate = (brands[(start + k) % len(brands)], attrs[0], *ptype)
            if candidate not in titles:
                title = candidate
                break
        if title is None:
            title = (brands[start], *attrs[:2], *ptype, str(pid))
        titles.add(title)
        n_opts = int(rng.integers(1, min(3, len(tpl["options"])) + 1))
        opt_names = sorted(rng.choice(tpl["options"], size=n_opts, replace=False).tolist())
        options = {}
        for name in opt_names:
            pool = OPTION_VALUES[name]
            n_vals = int(rng.integers(2, min(4, len(pool)) + 1))
            chosen = set(rng.choice(pool, size=n_vals, replace=False).tolist())
            options[name] = tuple(v for v in pool if v in chosen)
        price = round(float(rng.uniform(10.0, 120.0)), 2)
        products.append(Product(pid, cat, title, ptype, frozenset(attrs), options, price))
    return Catalog(tuple(products), tuple(name for name, _ in templates))


def render_goal(attributes: Sequence[str], ptype: Sequence[str],
                options: Mapping[str, str], cap: float) -> tuple[str, ...]:
    opts = "".join(f" with {name} {value}" for name, value in sorted(options.items()))
    text = GOAL_TEMPLATE.format(attributes=" and ".join(attributes), ptype=" ".join(ptype),
                                options=opts, cap=f"{cap:g}")
    return tokenize(text)


def sample_instruction(catalog: Catalog, rng: np.random.Generator, *,
                       category: str | None = None, goal_id: str = "") -> Instruction:
    """Pick a target product and render a goal for it."""
    pool = catalog.in_category(category) if category else list(catalog.products)
    if not pool:
        raise ContractViolation("cannot sample an instruction from an empty catalog")
    target = pool[int(rng.integers(len(pool)))]
    attrs = sorted(target.attributes)
    n_att = int(rng.integers(1, min(3, len(attrs)) + 1))
    required = sorted(str(a) for a in rng.choice(attrs, size=n_att, replace=False))
    req_opts = {}
    for name, values in target.options.items():
        if rng.random() < 0.5:
            req_opts[name] = values[int(rng.integers(len(values)))]
    if rng.random() < SATISFIABLE_PRICE_PROB:
        cap = math.ceil(target.price * rng.uniform(1.05, 1.6) / PRICE_CAP_STEP) * PRICE_CAP_STEP
    else:
        cap = math.floor(target.price * rng.uniform(0.5, 0.85) / PRICE_CAP_STEP) * PRICE_CAP_STEP
        cap = max(PRICE_CAP_STEP, cap)
    cap = float(cap)
    return Instruction(
        goal_text=render_goal(required, target.product_type, req_opts, cap),
        required_attributes=frozenset(required),
        required_options=req_opts,
        price_cap=cap,
        target_type=target.product_type,
        source_category=target.category,
        target_id=target.id,
        goal_id=goal_id,
    )


class GoalStream:
    """Reproducible, labelled stream of instructions.

    Streams with different ``split`` labels draw from independent generators,
    and every goal id carries its split, so train and eval goals never collide.
    """

    def __init__(self, catalog: Catalog, seed: int, split: str, category: str | None = None):
        self.catalog = catalog
        self.split = split
        self.category = category
        self.seed = seed
        self._rng = np.random.default_rng([seed, _stable_hash(split)])
        self._count = 0

    def __call__(self) -> Instruction:
        ins = sample_instruction(self.catalog, self._rng, category=self.category,
                                 goal_id=f"{self.split}:{self.seed}:{self._count}")
        self._count += 1
        return ins

    def take(self, n: int) -> list[Instruction]:
        return [self() for _ in range(n)]


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


# --- reward -----------------------------------------------------------------

def _type_ratio(product: Product, instruction: Instruction) -> tuple[int, int]:
    wanted = instruction.target_type
    if not wanted:
        return 1, 1
    hits = sum(t in set(product.title) for t in wanted)
    if 4 * hits >= 3 * len(wanted):
        return 1, 1
    if 2 * hits >= len(wanted):
        return 1, 2
    if hits > 0:
        return 1, 10
    return 0, 1


def type_match(product: Product, instruction: Instruction) -> float:
    """Text-matching product-type factor in {0, 0.1, 0.5, 1}."""
    num, den = _type_ratio(product, instruction)
    return num / den


def compute_reward(product: Product, selected_options: Mapping[str, str],
                   instruction: Instruction) -> float:
    att_hits = len(instruction.required_attributes & product.attributes)
    opt_hits = sum(1 for name, value in instruction.required_options.items()
                   if selected_options.get(name) == value)
    price_ok = 1 if product.price <= instruction.price_cap else 0
    denom = len(instruction.required_attributes) + len(instruction.required_options) + 1
    # one integer division, so the result is the correctly rounded rational value
    num, den = _type_ratio(product, instruction)
    return num * (att_hits + opt_hits + price_ok) / (den * denom)


# --- search -----------------------------------------------------------------

def rank_products(catalog: Catalog, query_tokens: Sequence[str]) -> list[int]:
    """Product ids by descending token-overlap score, ties by ascending id."""
    if not query_tokens:
        return []
    scored = []
    for p in catalog.products:
        title, ptype = set(p.title), set(p.product_type)
        score = sum(t in title for t in query_tokens) + 2 * sum(t in ptype for t in query_tokens)
        scored.append((-score, p.id))
    scored.sort()
    return [pid for _, pid in scored]


# --- page state machine -------------------------------------------------------

@dataclass(frozen=True)
class PageState:
    kind: PageKind
    results_page_index: int = 1
    ranked_product_ids: tuple[int, ...] = ()
    focused_product: int | None = None
    selected_options: tuple[tuple[str, str], ...] = ()
    sub_kind: SubKind | None = None
    last_query: tuple[str, ...] = ()

    @property
    def selected(self) -> dict[str, str]:
        return dict(self.selected_options)


@dataclass(frozen=True)
class Observation:
    text: tuple[str, ...]
    actions: tuple[ActionSpec, ...]
    page_kind: PageKind

    def __post_init__(self):
        if not self.actions:
            raise ContractViolation("observation without actions")


@dataclass(frozen=True)
class EpisodeState:
    instruction: Instruction
    page: PageState
    step_count: int = 0
    done: bool = False
    purchased: tuple[int, tuple[tuple[str, str], ...]] | None = None


def _results_slice(page: PageState, per_page: int) -> tuple[int, ...]:
    start = (page.results_page_index - 1) * per_page
    return page.ranked_product_ids[start:start + per_page]


def _fmt_price(price: float) -> str:
    return f"{price:.2f}"


def available_actions(catalog: Catalog, page: PageState,
                      per_page: int = RESULTS_PER_PAGE) -> tuple[ActionSpec, ...]:
    if page.kind is PageKind.SEARCH:
        return (QUERY_SLOT, SEARCH)
    if page.kind is PageKind.RESULTS:
        acts = [ActionSpec(ActionKind.CLICK, catalog.get(pid).title)
                for pid in _results_slice(page, per_page)]
        if page.results_page_index * per_page < len(page.ranked_product_ids):
            acts.append(NEXT)
        if page.results_page_index > 1:
            acts.append(PREV)
        acts.append(BACK_TO_SEARCH)
        return tuple(acts)
    if page.kind is PageKind.ITEM:
        product = catalog.get(page.focused_product)
        acts = [BACK_TO_SEARCH, PREV, DESCRIPTION, FEATURES, REVIEWS, BUY_NOW]
        for values in product.options.values():
            acts.extend(ActionSpec(ActionKind.CLICK, (v,)) for v in values)
        return tuple(acts)
    return (BACK_TO_SEARCH, PREV)


def render(catalog: Catalog, state: EpisodeState,
           per_page: int = RESULTS_PER_PAGE) -> Observation:
    """Pure rendering of the visible page."""
    page = state.page
    if page.kind is PageKind.SEARCH:
        text = ("webshop", "instruction", *state.instruction.goal_text, "search")
    elif page.kind is PageKind.RESULTS:
        shown = _results_slice(page, per_page)
        n_pages = max(1, math.ceil(len(page.ranked_product_ids) / per_page))
        text = ["results", "page", str(page.results_page_index), "of", str(n_pages),
                "query", *page.last_query]
        if not shown:
            text += ["no", "products", "found"]
        for pid in shown:
            p = catalog.get(pid)
            text += [*p.title, "price", _fmt_price(p.price)]
        text = tuple(text)
    elif page.kind is PageKind.ITEM:
        p = catalog.get(page.focused_product)
        text = ["item", *p.title, "price", _fmt_price(p.price), "options"]
        for name, values in p.options.items():
            text += [name, *values]
        text.append("selected")
        for name, value in page.selected_options:
            text += [name, value]
        text = tuple(text)
    else:
        p = catalog.get(page.focused_product)
        if page.sub_kind is SubKind.DESCRIPTION:
            text = ("description", *p.title, "a", *p.product_type, "from", p.category, "store")
        elif page.sub_kind is SubKind.FEATURES:
            text = ("features", *sorted(p.attributes))
        else:
            text = ("reviews", *p.title, "rated", str(3 + p.id % 3), "stars")
    return Observation(text=tuple(text), actions=available_actions(catalog, page, per_page),
                       page_kind=page.kind)


def is_legal(obs: Observation, action: ActionSpec) -> bool:
    if action.kind is ActionKind.SEARCH_QUERY:
        return any(a.kind is ActionKind.SEARCH_QUERY for a in obs.actions)
    return action in obs.actions


def transition(catalog: Catalog, state: EpisodeState, action: ActionSpec, *,
               horizon: int = DEFAULT_HORIZON,
               per_page: int = RESULTS_PER_PAGE) -> tuple[EpisodeState, float]:
    """Successor episode state and reward.  Raises on illegal actions."""
    if state.done:
        raise ContractViolation("episode already finished")
    obs = render(catalog, state, per_page)
    if not is_legal(obs, action):
        raise IllegalActionError(f"{action} not available on {state.page.kind.value} page")
    page = state.page
    reward = 0.0
    purchased = None
    if page.kind is PageKind.SEARCH:
        q = action.surface[:MAX_QUERY_TOKENS] if action.kind is ActionKind.SEARCH_QUERY \
            else page.last_query
        new_page = PageState(PageKind.RESULTS, 1, tuple(rank_products(catalog, q)), last_query=q)
    elif action == BACK_TO_SEARCH:
        new_page = PageState(PageKind.SEARCH, last_query=page.last_query)
    elif page.kind is PageKind.RESULTS:
        if action == NEXT:
            new_page = replace(page, results_page_index=page.results_page_index + 1)
        elif action == PREV:
            new_page = replace(page, results_page_index=page.results_page_index - 1)
        else:
            pid = next(pid for pid in _results_slice(page, per_page)
                       if catalog.get(pid).title == action.surface)
            new_page = replace(page, kind=PageKind.ITEM, focused_product=pid,
                               selected_options=())
    elif page.kind is PageKind.ITEM:
        product = catalog.get(page.focused_product)
        if action == PREV:
            new_page = replace(page, kind=PageKind.RESULTS, focused_product=None,
                               selected_options=())
        elif action in _SUB_BUTTONS:
            new_page = replace(page, kind=PageKind.ITEM_SUB, sub_kind=_SUB_BUTTONS[action])
        elif action == BUY_NOW:
            new_page = page
            purchased = (product.id, page.selected_options)
            reward = compute_reward(product, page.selected, state.instruction)
        else:
            value = action.surface[0]
            name = next(n for n, vals in product.options.items() if value in vals)
            selected = page.selected
            selected[name] = value
            new_page = replace(page, selected_options=tuple(sorted(selected.items())))
    else:  # item sub-page: only "< prev" remains
        new_page = replace(page, kind=PageKind.ITEM, sub_kind=None)
    steps = state.step_count + 1
    done = purchased is not None or steps >= horizon
    return EpisodeState(state.instruction, new_page, steps, done, purchased), reward


class ShopEnv:
    """Stateful wrapper around :func:`transition` for one session."""

    def __init__(self, catalog: Catalog, horizon: int = DEFAULT_HORIZON,
                 per_page: int = RESULTS_PER_PAGE):
        self.catalog = catalog
        self.horizon = horizon
        self.per_page = per_page
        self.state: EpisodeState | None = None

    def reset(self, instruction: Instruction) -> Observation:
        self.state = EpisodeState(instruction, PageState(PageKind.SEARCH))
        return self.observe()

    def observe(self) -> Observation:
        return render(self.catalog, self.state, self.per_page)

    def step(self, action: ActionSpec) -> tuple[Observation, float, bool]:
        if self.state is None:
            raise ContractViolation("reset() before step()")
        self.state, reward = transition(self.catalog, self.state, action,
                                        horizon=self.horizon, per_page=self.per_page)
        return self.observe(), reward, self.state.done
