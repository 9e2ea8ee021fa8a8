"""Linear programs with a handful of binaries.

The simplex work is done by HiGHS' dual simplex through
`scipy.optimize.linprog`; binaries are handled by exhaustive enumeration of
their fixings.
"""
import itertools
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from exceptions import ResourceLimitError, SolverError

logger = logging.getLogger(__name__)

MAX_BINARIES = 16
FEASIBILITY_TOL = 1e-7
OPTIMALITY_TOL = 1e-7

Matrix = Union[np.ndarray, sp.spmatrix]


class LPStatus(str, Enum):
    OPTIMAL = 'optimal'
    INFEASIBLE = 'infeasible'
    UNBOUNDED = 'unbounded'


@dataclass(frozen=True)
class LinearProgram:
    """maximize c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lb <= x <= ub."""
    objective: np.ndarray
    A_eq: Optional[Matrix] = None
    b_eq: Optional[np.ndarray] = None
    A_ub: Optional[Matrix] = None
    b_ub: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        n = len(self.objective)
        lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        object.__setattr__(self, 'objective', np.asarray(self.objective, dtype=float))
        object.__setattr__(self, 'lb', lb)
        object.__setattr__(self, 'ub', ub)
        if lb.shape != (n,) or ub.shape != (n,):
            raise SolverError(f"bounds have shapes {lb.shape}/{ub.shape}, expected ({n},)")
        if (lb > ub).any():
            bad = int(np.flatnonzero(lb > ub)[0])
            raise SolverError(f"lower bound exceeds upper bound for variable {self.name(bad)}")
        for label, A, b in (('equality', self.A_eq, self.b_eq), ('inequality', self.A_ub, self.b_ub)):
            if (A is None) != (b is None):
                raise SolverError(f"{label} matrix and right-hand side must be given together")
            if A is not None and (A.shape[1] != n or A.shape[0] != len(b)):
                raise SolverError(f"{label} block has shape {A.shape} for {len(b)} rows and {n} variables")
        if self.names is not None and len(self.names) != n:
            raise SolverError(f"{len(self.names)} names for {n} variables")

    @property
    def n_vars(self) -> int:
        return len(self.objective)

    def name(self, j: int) -> str:
        return self.names[j] if self.names is not None else f'x{j}'

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> 'LinearProgram':
        return replace(self, lb=lb, ub=ub)


@dataclass(frozen=True)
class Solution:
    status: LPStatus
    x: Optional[np.ndarray]
    objective_value: float
    duals_eq: Optional[np.ndarray] = None
    binaries: Optional[Tuple[int, ...]] = None

    @property
    def optimal(self) -> bool:
        return self.status == LPStatus.OPTIMAL


INFEASIBLE = Solution(LPStatus.INFEASIBLE, None, -np.inf)


def solve_lp(lp: LinearProgram) -> Solution:
    """Solve a bounded-variable LP with the HiGHS dual simplex.

    Raises:
        SolverError: If the engine stops for any reason other than
            optimality, infeasibility or unboundedness
    """
    try:
        res = linprog(
            -lp.objective,
            A_ub=lp.A_ub, b_ub=lp.b_ub,
            A_eq=lp.A_eq, b_eq=lp.b_eq,
            bounds=np.column_stack([lp.lb, lp.ub]),
            method='highs-ds',
            options={'primal_feasibility_tolerance': FEASIBILITY_TOL,
                     'dual_feasibility_tolerance': OPTIMALITY_TOL},
        )
    except Exception as e:
        logger.error(f"Error solving LP with {lp.n_vars} variables: {e}")
        raise SolverError(f"Failed to solve LP: {str(e)}")
    if res.status == 0:
        duals = None
        if lp.A_eq is not None and getattr(res, 'eqlin', None) is not None:
            duals = -np.asarray(res.eqlin.marginals)
        return Solution(LPStatus.OPTIMAL, res.x, float(lp.objective @ res.x), duals)
    if res.status == 2:
        return INFEASIBLE
    if res.status == 3:
        return Solution(LPStatus.UNBOUNDED, None, np.inf)
    logger.error(f"LP engine stopped with status {res.status}: {res.message}")
    raise SolverError(f"LP engine failed: {res.message}")


def solve_with_binaries(lp: LinearProgram, binary_vars: Sequence[int]) -> Solution:
    """Exact optimum over every 0/1 fixing of `binary_vars`.

    Fixings are visited in lexicographic order and only a strictly better
    objective replaces the incumbent, so ties go to the smaller vector.

    Raises:
        ResourceLimitError: If more than MAX_BINARIES binaries are given
    """
    binary_vars = list(binary_vars)
    if len(binary_vars) > MAX_BINARIES:
        raise ResourceLimitError(f"{len(binary_vars)} binaries exceed the enumeration guard of {MAX_BINARIES}")
    if not binary_vars:
        return solve_lp(lp)

    best = INFEASIBLE
    for fixing in itertools.product((0, 1), repeat=len(binary_vars)):
        values = np.asarray(fixing, dtype=float)
        # a fixing outside the variable's own bounds is not a candidate
        if (values < lp.lb[binary_vars]).any() or (values > lp.ub[binary_vars]).any():
            continue
        lb, ub = lp.lb.copy(), lp.ub.copy()
        lb[binary_vars] = values
        ub[binary_vars] = values
        sol = solve_lp(lp.with_bounds(lb, ub))
        if sol.status == LPStatus.UNBOUNDED:
            return replace(sol, binaries=fixing)
        if sol.optimal and sol.objective_value > best.objective_value + 1e-9 * max(1.0, abs(best.objective_value)):
            best = replace(sol, binaries=fixing)
    return best


def _lp_name(name: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.]', '_', name)


def _lp_terms(coefficients, names: List[str]) -> str:
    terms = [f"{'-' if v < 0 else '+'} {abs(v):.12g} {names[j]}" for j, v in coefficients if v != 0]
    text = ' '.join(terms) if terms else '0 ' + names[0]
    return text[2:] if text.startswith('+ ') else text


def write_lp(lp: LinearProgram, path: Union[str, Path], binary_vars: Sequence[int] = (),
             title: str = 'hydrovalue') -> Path:
    """Dump the program in CPLEX LP text format."""
    path = Path(path)
    names = [_lp_name(lp.name(j)) for j in range(lp.n_vars)]
    lines = [f'\\ {title}', 'Maximize', ' obj: ' + _lp_terms(enumerate(lp.objective), names), 'Subject To']
    for prefix, A, b, sense in (('e', lp.A_eq, lp.b_eq, '='), ('c', lp.A_ub, lp.b_ub, '<=')):
        if A is None:
            continue
        A = sp.csr_matrix(A)
        for i in range(A.shape[0]):
            row = A.getrow(i)
            lines.append(f' {prefix}{i}: {_lp_terms(zip(row.indices, row.data), names)} {sense} {b[i]:.12g}')
    lines.append('Bounds')
    for j, (lo, hi) in enumerate(zip(lp.lb, lp.ub)):
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f' {names[j]} free')
        elif np.isinf(hi):
            lines.append(f' {names[j]} >= {lo:.12g}')
        elif np.isinf(lo):
            lines.append(f' -inf <= {names[j]} <= {hi:.12g}')
        else:
            lines.append(f' {lo:.12g} <= {names[j]} <= {hi:.12g}')
    if len(binary_vars):
        lines.append('Binaries')
        lines.append(' ' + ' '.join(names[j] for j in binary_vars))
    lines.append('End')
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n')
    logger.debug(f"Wrote LP with {lp.n_vars} variables to {path}")
    return path
