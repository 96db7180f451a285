"""Program induction and synthesis over visiting-goal sequences.

The AST compresses a goal-label sequence into counted loops and palindromic
walks (out-and-back traversals), renders it as runnable-looking source text,
and validates synthesized programs against the set of controller transitions
observed in demonstrations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

PROGRAM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Execute:
    goal: int


@dataclass(frozen=True)
class Seq:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Repeat:
    count: int
    body: "ProgramNode"

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"Repeat count must be >= 2, got {self.count}")


@dataclass(frozen=True)
class PalindromeLoop:
    """Walks labels l1..ln then back ln-1..l1 (expansion length 2n-1)."""

    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise ValueError("PalindromeLoop needs at least 2 labels")


@dataclass(frozen=True)
class Cond:
    """Conditional branch evaluated at a controller boundary; the predicate is
    a named hook resolved by the executor. break_after exits the innermost
    Repeat after the branch body runs."""

    predicate: str
    argument: float
    then: tuple = ()
    break_after: bool = False

    def __post_init__(self):
        object.__setattr__(self, "then", tuple(self.then))


ProgramNode = Execute | Seq | Repeat | PalindromeLoop | Cond


# ---------------------------------------------------------------------------
# Induction


def _longest_odd_palindrome(seq):
    """(start, length) of the longest odd palindromic run >= 3, leftmost on ties."""
    n = len(seq)
    best = None  # (length, start)
    for center in range(n):
        r = 0
        while center - r - 1 >= 0 and center + r + 1 < n and seq[center - r - 1] == seq[center + r + 1]:
            r += 1
        length = 2 * r + 1
        if length >= 3:
            start = center - r
            if best is None or length > best[0] or (length == best[0] and start < best[1]):
                best = (length, start)
    if best is None:
        return None
    return best[1], best[0]


def _compress_palindromes(seq):
    if not seq:
        return []
    hit = _longest_odd_palindrome(seq)
    if hit is None:
        return [Execute(label) for label in seq]
    start, length = hit
    half = seq[start : start + (length + 1) // 2]
    return (
        _compress_palindromes(seq[:start])
        + [PalindromeLoop(tuple(half))]
        + _compress_palindromes(seq[start + length :])
    )


def _repeat_candidates(seq):
    """All (start, block_len, copies) of adjacent block repetitions, copies maximal."""
    n = len(seq)
    out = []
    for block in range(1, n // 2 + 1):
        for i in range(0, n - 2 * block + 1):
            r = 1
            while i + (r + 1) * block <= n and seq[i + r * block : i + (r + 1) * block] == seq[i : i + block]:
                r += 1
            if r >= 2:
                out.append((i, block, r))
    return out


def _body_starts_with_palindrome(body):
    toks = _compress_palindromes(body)
    return bool(toks) and isinstance(toks[0], PalindromeLoop)


def _compress(seq):
    if not seq:
        return []
    candidates = _repeat_candidates(seq)
    if candidates:
        best_cover = max(r * block for (_, block, r) in candidates)
        tied = [c for c in candidates if c[2] * c[1] == best_cover]
        # A repeated cycle reads best when its body opens with the out-and-back
        # walk, so alignments whose body compresses to a palindrome-initial
        # stream win; then leftmost start, then the shortest block.
        preferred = [c for c in tied if _body_starts_with_palindrome(seq[c[0] : c[0] + c[1]])]
        pool = preferred if preferred else tied
        i, block, r = min(pool, key=lambda c: (c[0], c[1]))
        body = _as_single_node(_compress(seq[i : i + block]))
        return _compress(seq[:i]) + [Repeat(r, body)] + _compress(seq[i + r * block :])
    return _compress_palindromes(seq)


def _as_single_node(tokens):
    if len(tokens) == 1:
        return tokens[0]
    return Seq(tuple(tokens))


def induce(sequence):
    """Compress a goal-label sequence into a program.

    Adjacent block repetitions become Repeat nodes (largest coverage first),
    then odd palindromic runs >= 3 become PalindromeLoop nodes (longest first,
    leftmost on ties), inside repeat bodies and leftovers alike.
    flatten(induce(s)) == s holds for every sequence.
    """
    seq = [int(v) for v in sequence]
    if not seq:
        raise ValueError("cannot induce a program from an empty sequence")
    return _as_single_node(_compress(seq))


# ---------------------------------------------------------------------------
# Semantics


def flatten(node):
    """Unconditional goal-label expansion (Cond branches are excluded)."""
    if isinstance(node, Execute):
        return [node.goal]
    if isinstance(node, Seq):
        out = []
        for child in node.children:
            out.extend(flatten(child))
        return out
    if isinstance(node, Repeat):
        return flatten(node.body) * node.count
    if isinstance(node, PalindromeLoop):
        half = list(node.labels)
        return half + half[-2::-1]
    if isinstance(node, Cond):
        return []
    raise TypeError(f"unknown node {node!r}")


def node_count(node):
    if isinstance(node, Seq):
        return 1 + sum(node_count(c) for c in node.children)
    if isinstance(node, Repeat):
        return 1 + node_count(node.body)
    if isinstance(node, Cond):
        return 1 + sum(node_count(c) for c in node.then)
    return 1


# ---------------------------------------------------------------------------
# Rendering


def render_source(node):
    """Stable, golden-testable source text in the induced-program style."""
    lines = ["def program():"]
    lines.extend(_render_body(node, 1, _LoopNames()))
    lines.append("    return")
    return "\n".join(lines) + "\n"


class _LoopNames:
    def __init__(self):
        self.depth = 0

    def next(self):
        name = "jkl"[self.depth % 3] + ("" if self.depth < 3 else str(self.depth // 3))
        self.depth += 1
        return name

    def release(self):
        self.depth -= 1


def _render_body(node, indent, names):
    pad = "    " * indent
    if isinstance(node, Execute):
        return [f"{pad}execute({node.goal})"]
    if isinstance(node, Seq):
        out = []
        for child in node.children:
            out.extend(_render_body(child, indent, names))
        return out
    if isinstance(node, Repeat):
        var = names.next()
        out = [f"{pad}for {var} in range({node.count}):"]
        out.extend(_render_body(node.body, indent + 1, names))
        names.release()
        return out
    if isinstance(node, PalindromeLoop):
        var = names.next()
        labels = ", ".join(str(l) for l in node.labels)
        inner = "    " * (indent + 1)
        out = [
            f"{pad}controller_list = [{labels}]",
            f"{pad}count = 0",
            f"{pad}for {var} in range(len(controller_list)*2-1):",
            f"{inner}execute(controller_list[count])",
            f"{inner}if {var} >= len(controller_list)-1:",
            f"{inner}    count = count-1",
            f"{inner}else:",
            f"{inner}    count = count+1",
        ]
        names.release()
        return out
    if isinstance(node, Cond):
        out = [f"{pad}if {node.predicate}({_fmt_num(node.argument)}):"]
        inner_pad = "    " * (indent + 1)
        for child in node.then:
            out.extend(_render_body(child, indent + 1, names))
        if node.break_after:
            out.append(f"{inner_pad}break")
        if not node.then and not node.break_after:
            out.append(f"{inner_pad}pass")
        return out
    raise TypeError(f"unknown node {node!r}")


def _fmt_num(v):
    return str(int(v)) if float(v).is_integer() else str(v)


# ---------------------------------------------------------------------------
# Serialization


def node_to_dict(node):
    if isinstance(node, Execute):
        return {"kind": "execute", "goal": node.goal}
    if isinstance(node, Seq):
        return {"kind": "seq", "children": [node_to_dict(c) for c in node.children]}
    if isinstance(node, Repeat):
        return {"kind": "repeat", "count": node.count, "body": node_to_dict(node.body)}
    if isinstance(node, PalindromeLoop):
        return {"kind": "palindrome", "labels": list(node.labels)}
    if isinstance(node, Cond):
        return {
            "kind": "cond",
            "predicate": node.predicate,
            "argument": node.argument,
            "then": [node_to_dict(c) for c in node.then],
            "break_after": node.break_after,
        }
    raise TypeError(f"unknown node {node!r}")


def node_from_dict(data):
    kind = data["kind"]
    if kind == "execute":
        return Execute(int(data["goal"]))
    if kind == "seq":
        return Seq(tuple(node_from_dict(c) for c in data["children"]))
    if kind == "repeat":
        return Repeat(int(data["count"]), node_from_dict(data["body"]))
    if kind == "palindrome":
        return PalindromeLoop(tuple(int(v) for v in data["labels"]))
    if kind == "cond":
        return Cond(
            predicate=data["predicate"],
            argument=float(data["argument"]),
            then=tuple(node_from_dict(c) for c in data.get("then", [])),
            break_after=bool(data.get("break_after", False)),
        )
    raise ValueError(f"unknown node kind {kind!r}")


def save_program(node, path):
    with open(path, "w") as fh:
        json.dump({"format_version": PROGRAM_FORMAT_VERSION, "ast": node_to_dict(node)}, fh, indent=2)
        fh.write("\n")


def load_program(path):
    with open(path) as fh:
        data = json.load(fh)
    version = data.get("format_version")
    if version != PROGRAM_FORMAT_VERSION:
        raise ValueError(f"unsupported program format_version {version!r}")
    return node_from_dict(data["ast"])


# ---------------------------------------------------------------------------
# Validation and synthesis


@dataclass(frozen=True)
class Violation:
    from_goal: int
    to_goal: int
    context: str

    def __str__(self):
        return f"transition {self.from_goal}->{self.to_goal} never demonstrated ({self.context})"


def _walk_paths(node, paths, context):
    """Extend every (goal_sequence, context_steps, broke) path with this node.

    Each path is (labels, contexts, broke); broke marks paths that hit a Break
    and must skip the rest of the innermost Repeat.
    """
    if isinstance(node, Execute):
        return [
            (labels + [node.goal], ctx + [context], broke) if not broke else (labels, ctx, broke)
            for labels, ctx, broke in paths
        ]
    if isinstance(node, Seq):
        for i, child in enumerate(node.children):
            paths = _walk_paths(child, paths, f"{context}/seq[{i}]")
        return paths
    if isinstance(node, PalindromeLoop):
        for i, goal in enumerate(flatten(node)):
            paths = [
                (labels + [goal], ctx + [f"{context}/palindrome[{i}]"], broke)
                if not broke
                else (labels, ctx, broke)
                for labels, ctx, broke in paths
            ]
        return paths
    if isinstance(node, Repeat):
        out = []
        for labels, ctx, broke in paths:
            if broke:
                out.append((labels, ctx, broke))
                continue
            branch_paths = [(labels, ctx, False)]
            for it in range(node.count):
                next_paths = []
                for bl, bc, bb in branch_paths:
                    if bb:
                        # Break exits the innermost Repeat entirely.
                        out.append((bl, bc, False))
                        continue
                    next_paths.extend(
                        _walk_paths(node.body, [(bl, bc, False)], f"{context}/repeat[iter {it}]")
                    )
                branch_paths = next_paths
            for bl, bc, bb in branch_paths:
                out.append((bl, bc, False))
        return out
    if isinstance(node, Cond):
        out = []
        for labels, ctx, broke in paths:
            if broke:
                out.append((labels, ctx, broke))
                continue
            out.append((labels, ctx, False))  # predicate false
            taken = [(labels, ctx, False)]
            for i, child in enumerate(node.then):
                taken = _walk_paths(child, taken, f"{context}/cond-then[{i}]")
            for tl, tc, _ in taken:
                out.append((tl, tc, node.break_after))
        return out
    raise TypeError(f"unknown node {node!r}")


def validate(program, start_goal, library):
    """Check every execution path against the demonstrated transition set.

    `library` is anything with a `has_transition(from_goal, to_goal)` method
    or a container of (from, to) pairs. Returns a list of Violations (empty
    when the program is valid).
    """
    if hasattr(library, "has_transition"):
        has = library.has_transition
    else:
        pairs = set(library)
        has = lambda a, b: (a, b) in pairs
    paths = _walk_paths(program, [([start_goal], ["start"], False)], "program")
    seen = set()
    violations = []
    for labels, contexts, _ in paths:
        for i in range(1, len(labels)):
            a, b = labels[i - 1], labels[i]
            if a == b and not has(a, b):
                continue  # already at the goal: executes as an arrival no-op
            if not has(a, b) and (a, b, contexts[i]) not in seen:
                seen.add((a, b, contexts[i]))
                violations.append(Violation(a, b, contexts[i]))
    return violations


class SynthesisError(ValueError):
    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class EditOp:
    """One program edit: insert/delete a child of a Seq, or wrap a subtree.

    path: indices from the root through Seq/Repeat/Cond children to the target.
    op: 'insert' (node at position), 'delete', 'wrap_repeat' (count),
    'append_cond' (node appended to the target Seq).
    """

    op: str
    path: tuple = ()
    node: "ProgramNode | None" = None
    count: int = 0


def _apply_edit(root, edit):
    if edit.op == "insert":
        parent = _resolve(root, edit.path[:-1])
        if not isinstance(parent, Seq):
            raise ValueError(f"insert target {edit.path[:-1]} is not a Seq")
        pos = edit.path[-1]
        children = list(parent.children)
        children.insert(pos, edit.node)
        return _replace(root, edit.path[:-1], Seq(tuple(children)))
    if edit.op == "delete":
        parent = _resolve(root, edit.path[:-1])
        if not isinstance(parent, Seq):
            raise ValueError(f"delete target {edit.path[:-1]} is not a Seq")
        children = list(parent.children)
        del children[edit.path[-1]]
        return _replace(root, edit.path[:-1], Seq(tuple(children)))
    if edit.op == "wrap_repeat":
        target = _resolve(root, edit.path)
        return _replace(root, edit.path, Repeat(edit.count, target))
    if edit.op == "append_cond":
        target = _resolve(root, edit.path)
        if not isinstance(target, Seq):
            raise ValueError(f"append_cond target {edit.path} is not a Seq")
        return _replace(root, edit.path, Seq(target.children + (edit.node,)))
    raise ValueError(f"unknown edit op {edit.op!r}")


def _resolve(node, path):
    for idx in path:
        if isinstance(node, Seq):
            node = node.children[idx]
        elif isinstance(node, Repeat):
            node = node.body
        elif isinstance(node, Cond):
            node = node.then[idx]
        else:
            raise ValueError(f"cannot descend into {node!r}")
    return node


def _replace(node, path, new):
    if not path:
        return new
    idx = path[0]
    if isinstance(node, Seq):
        children = list(node.children)
        children[idx] = _replace(children[idx], path[1:], new)
        return Seq(tuple(children))
    if isinstance(node, Repeat):
        return Repeat(node.count, _replace(node.body, path[1:], new))
    if isinstance(node, Cond):
        then = list(node.then)
        then[idx] = _replace(then[idx], path[1:], new)
        return Cond(node.predicate, node.argument, tuple(then), node.break_after)
    raise ValueError(f"cannot descend into {node!r}")


def synthesize(edits, base, start_goal, library):
    """Apply an edit script and re-validate; rejects atomically on violation."""
    base_violations = validate(base, start_goal, library)
    if base_violations:
        raise SynthesisError(base_violations)
    program = base
    for edit in edits:
        program = _apply_edit(program, edit)
    violations = validate(program, start_goal, library)
    if violations:
        raise SynthesisError(violations)
    return program
