"""Parser and printer for the ``.stg`` graph-fragment format.

A fragment is a small text program with three to four sections::

    # qkv projection with the weight split column-wise
    Inputs:
    X[Batch/dp, D1/tp]
    Weights:
    W[D1/tp, D2]
    Output:
    Y[Batch/dp, D2/tp]
    Compute:
    X*[Batch/dp, D1] = AllGather[tp](X)
    Y*[Batch/dp, D2 @ 1/tp] = einsum[bm,mn->bn](X*, W)
    Y[Batch/dp, D2/tp] = ReduceScatter[tp](Y*)

Syntax rules:

* ``#`` starts a comment (full line or trailing); blank lines are ignored;
  everything is case-sensitive; one statement per line.
* A tensor reference is ``name[entries]``.  Each entry is a dimension
  expression optionally divided by parallel symbols (``B/dp``, ``4H/tp``);
  division order gives the shard nesting, outer first.  A trailing
  ``@ 1/p`` (or tight ``D2@1/p``) marks the whole tensor a partial sum over
  ``p``; a bare ``@ 1`` is the explicit no-op marker for a replicated value.
* Identifiers may carry trailing ``*`` (conventionally "the re-distributed
  variant of").  Tensor names and dimension symbols live in different
  namespaces, so a tensor ``B`` can coexist with a batch symbol ``B``.
* ``Inputs:`` / ``Weights:`` lines declare tensors, several per line when
  comma-separated.  ``Output:`` (or ``Outputs:``) names produced tensors;
  its annotations are informational.
* ``Compute:`` statements have the shape ``target = op[attr](args...)``.
  Ops: ``einsum`` (attr = index spec, the ``->output`` part optional — when
  missing, the output takes the first operand's indices), ``pscan`` (attr =
  ``dim=N``), the four collectives (attr = parallel symbol, optional), and
  any other identifier, which is an elementwise function of that name.
* Calls nest: ``ReduceScatter(AllGather(T1))`` first gathers, then
  scatters.  A collective without ``[symbol]`` is resolved by comparing the
  distributions on both sides of the chain; when several pending
  transitions share its kind the source must disambiguate with an attribute.

Errors carry the 1-based line (and column where it helps) of the offending
text.  ``str(parse(text))`` prints a canonical form (one declaration per
line, explicit collective symbols, explicit einsum arrows) and is stable:
parsing its own output prints the identical string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .dist import Distribution
from .errors import (
    ShapeConflictError,
    TemplateSyntaxError,
    UndefinedTensorError,
)
from .graph import (
    ACTIVATION,
    CommNode,
    Einsum,
    EinsumSpec,
    Elementwise,
    Fused,
    INPUT,
    OpNode,
    PScan,
    STGraph,
    SliceOp,
    SymTensor,
    WEIGHT,
    infer_einsum_dist,
)
from .dist import PARTIAL, SHARD
from .matcher import (
    ALL_GATHER,
    ALL_REDUCE,
    ALL_TO_ALL,
    REDUCE_SCATTER,
    CommStep,
    apply_step,
    steps_between,
)
from .symbols import DimExpr, SymbolRegistry, parse_dim

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\*{0,2}")
_SECTIONS = {"Inputs": "inputs", "Weights": "weights",
             "Output": "outputs", "Outputs": "outputs", "Compute": "compute"}
_COMM_OPS = (ALL_REDUCE, ALL_GATHER, REDUCE_SCATTER, ALL_TO_ALL)


@dataclass
class Template:
    """A parsed fragment: the graph plus its interface lists."""

    graph: STGraph
    registry: SymbolRegistry
    inputs: List[str] = field(default_factory=list)
    weights: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    #: synthesized names for nested-call results; re-inlined when printing
    inline: Set[str] = field(default_factory=set)
    name: str = ""

    def __str__(self) -> str:
        return render(self)


# --- tensor annotation parsing ---


def _split_top(text: str, sep: str) -> List[str]:
    """Split on ``sep`` outside any brackets/parens."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == sep and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return parts


def parse_annotation(body: str, registry: SymbolRegistry, line: int
                     ) -> Tuple[Tuple[DimExpr, ...], Distribution]:
    """Parse the interior of ``[...]``: dims, shard divisors, partial marker."""
    dims: List[DimExpr] = []
    shard_map: Dict[int, List] = {}
    partial: List = []
    entries = _split_top(body, ",")
    if entries == [""]:
        entries = []
    for pos, entry in enumerate(entries):
        text = entry.strip()
        marker = None
        if "@" in text:
            text, _, marker = text.partition("@")
            text = text.strip()
        if not text:
            raise TemplateSyntaxError("empty dimension entry", line)
        segs = text.split("/")
        base = segs[0].strip()
        shards = []
        for seg in segs[1:]:
            seg = seg.strip()
            if seg.isdigit():
                base = f"{base}/{seg}"
            elif _IDENT.fullmatch(seg):
                shards.append(registry.declare_parallel(seg))
            else:
                raise TemplateSyntaxError(
                    f"bad divisor {seg!r} in dimension {entry.strip()!r}", line)
        try:
            dims.append(parse_dim(base, registry))
        except Exception as e:
            raise TemplateSyntaxError(
                f"bad dimension expression {base!r}: {e}", line) from None
        if shards:
            shard_map[pos] = shards
        if marker is not None:
            marker = marker.strip()
            if not marker.startswith("1"):
                raise TemplateSyntaxError(
                    f"partial marker must start with '1', got @{marker!r}", line)
            rest = marker[1:].strip()
            for seg in rest.split("/"):
                seg = seg.strip()
                if not seg:
                    continue
                partial.append(registry.declare_parallel(seg))
    return tuple(dims), Distribution.make(shard_map, partial)


def _parse_decl(text: str, registry: SymbolRegistry, line: int
                ) -> Tuple[str, Optional[Tuple[Tuple[DimExpr, ...], Distribution]]]:
    text = text.strip()
    m = _IDENT.match(text)
    if not m:
        raise TemplateSyntaxError(f"expected tensor name, got {text!r}", line)
    name = m.group(0)
    rest = text[m.end():].strip()
    if not rest:
        return name, None
    if not (rest.startswith("[") and rest.endswith("]")):
        raise TemplateSyntaxError(
            f"malformed declaration {text!r}", line, m.end() + 1)
    return name, parse_annotation(rest[1:-1], registry, line)


# --- expression parsing ---


class _ExprParser:
    """Recursive descent over one statement's right-hand side."""

    def __init__(self, text: str, line: int, owner: "_FileParser"):
        self.text = text
        self.pos = 0
        self.line = line
        self.owner = owner

    def error(self, msg: str):
        raise TemplateSyntaxError(msg, self.line, self.pos + 1)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        self.skip_ws()
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def ident(self) -> str:
        self.skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            self.error("expected a name")
        self.pos = m.end()
        return m.group(0)

    def bracket_text(self) -> Optional[str]:
        self.skip_ws()
        if self.peek() != "[":
            return None
        depth, start = 0, self.pos
        for i in range(self.pos, len(self.text)):
            if self.text[i] == "[":
                depth += 1
            elif self.text[i] == "]":
                depth -= 1
                if depth == 0:
                    self.pos = i + 1
                    return self.text[start + 1:i]
        self.error("unclosed '['")

    def parse(self) -> str:
        """Parse the full expression; returns the produced tensor's name."""
        result = self.expr(top=True)
        self.skip_ws()
        if self.pos != len(self.text):
            self.error("trailing text after expression")
        return result

    def expr(self, top: bool = False) -> str:
        name = self.ident()
        self.skip_ws()
        nxt = self.peek()
        if nxt != "(" and nxt != "[":
            # plain tensor reference
            if name not in self.owner.graph.tensors:
                raise UndefinedTensorError(
                    f"line {self.line}: unknown tensor {name!r}")
            return name
        attr = self.bracket_text()
        self.expect("(")
        args = [self.expr()]
        self.skip_ws()
        while self.peek() == ",":
            self.pos += 1
            args.append(self.expr())
            self.skip_ws()
        self.expect(")")
        return self.owner.emit_call(name, attr, args, self.line, top)


# --- file parsing ---


class _FileParser:
    def __init__(self, registry: Optional[SymbolRegistry], name: str):
        self.registry = registry if registry is not None else SymbolRegistry()
        self.graph = STGraph()
        self.t = Template(self.graph, self.registry, name=name)
        self.section: Optional[str] = None
        #: declared-but-unchecked output names -> declaration line
        self.pending_outputs: Dict[str, int] = {}
        self._synth = 0

    # - statement-level callbacks -

    def declare(self, text: str, line: int, role: str, into: List[str]):
        for piece in _split_top(text, ","):
            if not piece.strip():
                continue
            name, annot = _parse_decl(piece, self.registry, line)
            if annot is None:
                raise TemplateSyntaxError(
                    f"declaration of {name!r} needs a shape", line)
            dims, dist = annot
            self.graph.add_tensor(
                SymTensor(name, dims, dist, role=role))
            into.append(name)

    def declare_output(self, text: str, line: int):
        for piece in _split_top(text, ","):
            if not piece.strip():
                continue
            name, _annot = _parse_decl(piece, self.registry, line)
            self.pending_outputs[name] = line
            self.t.outputs.append(name)

    def synth_name(self, base: str) -> str:
        self._synth += 1
        return f"{base}~{self._synth}"

    def emit_call(self, op: str, attr: Optional[str], args: List[str],
                  line: int, top: bool) -> str:
        """Create the node for one call; returns its output tensor name."""
        out_name = self.current_target if top else self.synth_name(
            self.current_target)
        if not top:
            self.t.inline.add(out_name)
        operands = [self.graph.tensor(a) for a in args]
        if op == "einsum":
            if attr is None:
                raise TemplateSyntaxError("einsum needs an index spec", line)
            try:
                spec = EinsumSpec.parse(attr)
            except Exception as e:
                raise TemplateSyntaxError(str(e), line) from None
            _, out_dims = spec.infer_dims(
                [t.dims for t in operands], where=f"line {line}: ")
            dist = infer_einsum_dist(spec, [t.dist for t in operands],
                                     where=f"line {line}: ")
            self._bind_target(out_name, out_dims, dist, top, line)
            self.graph.add_node(Einsum(self.graph.fresh_id(), out_name,
                                       args, spec))
        elif op == "pscan":
            if attr is None or not attr.replace(" ", "").startswith("dim="):
                raise TemplateSyntaxError("pscan needs [dim=N]", line)
            scan_dim = int(attr.replace(" ", "")[4:])
            if len(args) != 2:
                raise TemplateSyntaxError(
                    "pscan takes (gates, values)", line)
            if operands[0].dims != operands[1].dims:
                raise ShapeConflictError(
                    f"line {line}: pscan operands must share a shape")
            self._bind_target(out_name, operands[0].dims, operands[0].dist,
                              top, line)
            self.graph.add_node(PScan(self.graph.fresh_id(), out_name,
                                      args, scan_dim))
        elif op in _COMM_OPS:
            if len(args) != 1:
                raise TemplateSyntaxError(f"{op} takes one argument", line)
            self._emit_comm(op, attr, args[0], out_name, top, line)
        else:
            if attr is not None:
                raise TemplateSyntaxError(
                    f"op {op!r} takes no attribute", line)
            self._bind_target(out_name, operands[0].dims, operands[0].dist,
                              top, line)
            self.graph.add_node(Elementwise(self.graph.fresh_id(), out_name,
                                            args, op))
        return out_name

    def _emit_comm(self, kind: str, attr: Optional[str], src: str,
                   out_name: str, top: bool, line: int):
        # The statement's annotation is the chain's destination even for
        # inner calls of a nested chain — each comm consumes one of the
        # transitions still pending between here and there.
        src_t = self.graph.tensor(src)
        target = self.current_annot
        if attr is not None:
            sym = self.registry.declare_parallel(attr.strip())
            step = self._step_for(kind, sym, src_t.dist, target, line)
        else:
            step = self._infer_step(kind, src_t.dist, target, line)
        dist = apply_step(src_t.dist, step)
        self._bind_target(out_name, src_t.dims, dist, top, line)
        self.graph.add_node(CommNode(
            self.graph.fresh_id(), out_name, (src,), kind, step.symbol,
            dim=step.dim if kind != ALL_TO_ALL else step.dst_dim,
            src_dim=step.src_dim))

    def _step_for(self, kind: str, sym, src_dist: Distribution,
                  target: Optional[Distribution], line: int) -> CommStep:
        if target is not None:
            for step in steps_between(src_dist, target):
                if step.kind == kind and step.symbol == sym:
                    return step
            raise TemplateSyntaxError(
                f"{kind}[{sym.name}] does not fit the declared "
                f"distributions", line)
        # Without a target annotation only source-determined steps work.
        state, dim = src_dist.state_of(sym)
        if kind == ALL_REDUCE and state == PARTIAL:
            return CommStep(ALL_REDUCE, sym)
        if kind == ALL_GATHER and state == SHARD:
            return CommStep(ALL_GATHER, sym, dim=dim)
        raise TemplateSyntaxError(
            f"{kind}[{sym.name}] needs a distribution annotation on the "
            f"statement target", line)

    def _infer_step(self, kind: str, src_dist: Distribution,
                    target: Optional[Distribution], line: int) -> CommStep:
        if target is None:
            raise TemplateSyntaxError(
                f"bare {kind} needs either [symbol] or a distribution "
                f"annotation on the statement target", line)
        fits = [s for s in steps_between(src_dist, target)
                if s.kind == kind]
        if not fits:
            raise TemplateSyntaxError(
                f"no {kind} leads from {src_dist} toward the declared "
                f"distribution", line)
        if len(fits) > 1:
            raise TemplateSyntaxError(
                f"{kind} is ambiguous here (candidates: "
                f"{', '.join(s.symbol.name for s in fits)}); add [symbol]",
                line)
        return fits[0]

    def _bind_target(self, name: str, dims: Sequence[DimExpr],
                     dist: Distribution, top: bool, line: int):
        """Record the result tensor, reconciling a top-level annotation."""
        if top and self.current_annot_dims is not None:
            decl = self.current_annot_dims
            if len(decl) != len(dims):
                raise TemplateSyntaxError(
                    f"{name!r} declared rank {len(decl)}, computed rank "
                    f"{len(dims)}", line)
            for d_decl, d_got in zip(decl, dims):
                if d_decl != d_got:
                    raise ShapeConflictError(
                        f"line {line}: {name!r} declared dimension {d_decl} "
                        f"but the computation yields {d_got}")
        use_dist = self.current_annot if (top and self.current_annot
                                          is not None) else dist
        if top and self.current_annot is not None and dist != self.current_annot:
            # A mismatch here means the author expects a different placement
            # than the computation produces with no further communication.
            raise TemplateSyntaxError(
                f"{name!r} declared as {self.current_annot} but the "
                f"right-hand side yields {dist}", line)
        self.graph.add_tensor(
            SymTensor(name, tuple(dims), use_dist, role=ACTIVATION))

    # - driver -

    def feed(self, raw: str, line: int):
        text = raw.split("#", 1)[0].rstrip()
        if not text.strip():
            return
        header = text.strip()
        if header.endswith(":") and header[:-1] in _SECTIONS:
            self.section = _SECTIONS[header[:-1]]
            return
        if self.section is None:
            raise TemplateSyntaxError(
                f"statement before any section header: {header!r}", line)
        if self.section == "inputs":
            self.declare(text, line, INPUT, self.t.inputs)
        elif self.section == "weights":
            self.declare(text, line, WEIGHT, self.t.weights)
        elif self.section == "outputs":
            self.declare_output(text, line)
        else:
            self.statement(text, line)

    def statement(self, text: str, line: int):
        lhs, eq, rhs = text.partition("=")
        if not eq:
            raise TemplateSyntaxError(f"expected '=' in {text.strip()!r}",
                                      line)
        name, annot = _parse_decl(lhs, self.registry, line)
        self.current_target = name
        self.current_annot_dims = annot[0] if annot else None
        self.current_annot = annot[1] if annot else None
        produced = _ExprParser(rhs.strip(), line, self).parse()
        if produced != name:
            # RHS was a bare tensor reference: alias via an identity op.
            self._bind_target(name, self.graph.tensor(produced).dims,
                              self.graph.tensor(produced).dist, True, line)
            self.graph.add_node(Elementwise(self.graph.fresh_id(), name,
                                            (produced,), "identity"))

    def finish(self) -> Template:
        for name, line in self.pending_outputs.items():
            if name not in self.graph.tensors:
                raise UndefinedTensorError(
                    f"line {line}: declared output {name!r} is never produced")
        self.graph.outputs = list(self.t.outputs)
        self.graph.validate()
        return self.t


def parse(text: str, registry: Optional[SymbolRegistry] = None,
          name: str = "") -> Template:
    p = _FileParser(registry, name)
    for i, raw in enumerate(text.splitlines(), start=1):
        p.feed(raw, i)
    return p.finish()


def parse_file(path, registry: Optional[SymbolRegistry] = None) -> Template:
    from pathlib import Path

    path = Path(path)
    return parse(path.read_text(encoding="utf-8"), registry, name=path.stem)


# --- printing ---


def _render_tensor(t: SymTensor) -> str:
    return t.annotate()


def _render_expr(tmpl: Template, node: OpNode) -> str:
    g = tmpl.graph

    def arg_text(name: str) -> str:
        if name in tmpl.inline and name in g.producer:
            return _render_expr(tmpl, g.node(g.producer[name]))
        return name

    args = ", ".join(arg_text(a) for a in node.ins)
    if isinstance(node, Einsum):
        return f"einsum[{node.spec}]({args})"
    if isinstance(node, PScan):
        return f"pscan[dim={node.scan_dim}]({args})"
    if isinstance(node, CommNode):
        sym = f"[{node.symbol.name}]" if node.symbol is not None else ""
        return f"{node.kind}{sym}({args})"
    if isinstance(node, Elementwise):
        return f"{node.fn}({args})"
    if isinstance(node, (SliceOp, Fused)):
        return f"{node.kind}[{node.args_text()}]({args})"
    raise TypeError(f"cannot render {node!r}")


def render(tmpl: Template) -> str:
    g = tmpl.graph
    lines: List[str] = []
    if tmpl.inputs:
        lines.append("Inputs:")
        lines.extend(_render_tensor(g.tensor(n)) for n in tmpl.inputs)
    if tmpl.weights:
        lines.append("Weights:")
        lines.extend(_render_tensor(g.tensor(n)) for n in tmpl.weights)
    if tmpl.outputs:
        lines.append("Output:")
        lines.extend(_render_tensor(g.tensor(n)) for n in tmpl.outputs)
    lines.append("Compute:")
    for node in g.nodes:
        if node.out in tmpl.inline:
            continue
        lines.append(
            f"{_render_tensor(g.tensor(node.out))} = {_render_expr(tmpl, node)}")
    return "\n".join(lines) + "\n"
