//! Exact reference: the full master equation in a Hilbert space truncated
//! at two excitations, with up to four individually tracked atoms.
//!
//! Basis order (index → state), for N atoms labelled 0..N:
//!
//! ```text
//! 0                    |0;∅⟩
//! 1                    |1;∅⟩
//! 2 ..= N+1            |0;{j}⟩          j ascending
//! N+2                  |2;∅⟩
//! N+3 ..= 2N+2         |1;{j}⟩          j ascending
//! 2N+3 ..              |0;{j,k}⟩        (j,k) lexicographic, j < k
//! ```

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::dynamics::{self, Emitter, Medium};
use crate::error::{Error, Result};
use crate::model::{RateParams, WEAK_DRIVE_LIMIT};
use crate::ode::{self, OdeOptions};
use crate::trace::CorrelationTrace;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

/// Largest number of atoms the oracle accepts.
pub const MAX_ATOMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncatedBasis {
    n_atoms: usize,
    /// (photons, bitmask of excited atoms)
    states: Vec<(u8, u8)>,
}

impl TruncatedBasis {
    pub fn new(n_atoms: usize) -> Result<Self> {
        if n_atoms > MAX_ATOMS {
            return Err(Error::OracleScope(format!(
                "{n_atoms} atoms requested, at most {MAX_ATOMS} supported"
            )));
        }
        let mut states = vec![(0, 0), (1, 0)];
        states.extend((0..n_atoms).map(|j| (0, 1u8 << j)));
        states.push((2, 0));
        states.extend((0..n_atoms).map(|j| (1, 1u8 << j)));
        for j in 0..n_atoms {
            for k in j + 1..n_atoms {
                states.push((0, (1u8 << j) | (1u8 << k)));
            }
        }
        Ok(TruncatedBasis { n_atoms, states })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// (photon number, excited-atom bitmask) of basis state `i`.
    pub fn state(&self, i: usize) -> (u8, u8) {
        self.states[i]
    }

    pub fn index(&self, photons: u8, excited: u8) -> Option<usize> {
        self.states.iter().position(|&s| s == (photons, excited))
    }

    /// Cavity annihilation operator restricted to the basis.
    pub fn annihilation(&self) -> DMatrix<C> {
        let d = self.dim();
        let mut m = DMatrix::from_element(d, d, ZERO);
        for (col, &(n, s)) in self.states.iter().enumerate() {
            if n > 0 {
                if let Some(row) = self.index(n - 1, s) {
                    m[(row, col)] = C::new((n as f64).sqrt(), 0.0);
                }
            }
        }
        m
    }

    /// Lowering operator σ₋ of atom `j`.
    pub fn lowering(&self, j: usize) -> DMatrix<C> {
        let d = self.dim();
        let bit = 1u8 << j;
        let mut m = DMatrix::from_element(d, d, ZERO);
        for (col, &(n, s)) in self.states.iter().enumerate() {
            if s & bit != 0 {
                if let Some(row) = self.index(n, s & !bit) {
                    m[(row, col)] = ONE;
                }
            }
        }
        m
    }
}

/// A density matrix on a [`TruncatedBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator(pub DMatrix<C>);

impl DensityOperator {
    pub fn pure(basis: &TruncatedBasis, index: usize) -> Self {
        let d = basis.dim();
        let mut m = DMatrix::from_element(d, d, ZERO);
        m[(index, index)] = ONE;
        DensityOperator(m)
    }

    pub fn trace(&self) -> C {
        self.0.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.0 - self.0.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.0 + self.0.adjoint()) * C::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn expectation(&self, op: &DMatrix<C>) -> C {
        (op * &self.0).trace()
    }

    /// Checks Hermiticity, unit trace and positivity.
    pub fn check(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm >= 1e-12 {
            return Err(Error::NonConvergence { residual: herm });
        }
        let tr = self.trace();
        if (tr - ONE).norm() > 1e-10 {
            return Err(Error::NonConvergence {
                residual: (tr - ONE).norm(),
            });
        }
        let min = self.min_eigenvalue();
        if min < -1e-9 {
            return Err(Error::NonConvergence { residual: -min });
        }
        Ok(())
    }
}

/// The master equation for a given parameter set and atom list.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    basis: TruncatedBasis,
    /// Non-Hermitian effective generator: dρ/dt = Xρ + ρX† + Σ J ρ J†.
    x: DMatrix<C>,
    jumps: Vec<DMatrix<C>>,
    number: DMatrix<C>,
    annihilation: DMatrix<C>,
}

impl MasterEquation {
    pub fn new(params: &RateParams, atoms: &[Emitter]) -> Result<Self> {
        params.validate()?;
        let ratio = params.eps_over_kappa();
        if ratio > WEAK_DRIVE_LIMIT {
            return Err(Error::OracleScope(format!(
                "eps/kappa = {ratio} exceeds {WEAK_DRIVE_LIMIT}"
            )));
        }
        if let Some(e) = atoms.iter().find(|e| e.multiplicity != 1.0) {
            return Err(Error::OracleScope(format!(
                "atoms must be tracked individually (multiplicity {})",
                e.multiplicity
            )));
        }
        let basis = TruncatedBasis::new(atoms.len())?;
        let a = basis.annihilation();
        let ad = a.adjoint();
        let number = &ad * &a;
        let mut x = (&ad - &a) * C::new(params.eps, 0.0) - &number * C::new(params.kappa, params.delta_c);
        let mut jumps = vec![&a * C::new((2.0 * params.kappa).sqrt(), 0.0)];
        for (j, atom) in atoms.iter().enumerate() {
            let s = basis.lowering(j);
            let sd = s.adjoint();
            // a†σ₋ lowers before raising, so it is exact on the truncated
            // space; its adjoint supplies aσ₊.
            let k = &ad * &s;
            x += (&k - k.adjoint()) * C::new(atom.coupling, 0.0);
            x -= (&sd * &s) * C::new(0.5 * params.gamma, atom.detuning);
            jumps.push(s * C::new(params.gamma.sqrt(), 0.0));
        }
        Ok(MasterEquation {
            basis,
            x,
            jumps,
            number,
            annihilation: a,
        })
    }

    pub fn basis(&self) -> &TruncatedBasis {
        &self.basis
    }

    pub fn photon_number(&self) -> &DMatrix<C> {
        &self.number
    }

    pub fn annihilation(&self) -> &DMatrix<C> {
        &self.annihilation
    }

    /// Non-Hermitian generator X of the no-jump evolution dψ/dt = Xψ.
    pub fn effective_generator(&self) -> &DMatrix<C> {
        &self.x
    }

    /// Jump operators: cavity emission first, then one per atom.
    pub fn jump_operators(&self) -> &[DMatrix<C>] {
        &self.jumps
    }

    pub fn apply(&self, rho: &DMatrix<C>) -> DMatrix<C> {
        let mut out = &self.x * rho + rho * self.x.adjoint();
        for j in &self.jumps {
            out += j * rho * j.adjoint();
        }
        out
    }

    /// Liouvillian as a d²×d² matrix acting on column-stacked ρ.
    pub fn superoperator(&self) -> DMatrix<C> {
        let d = self.basis.dim();
        let mut l = DMatrix::from_element(d * d, d * d, ZERO);
        let mut e = DMatrix::from_element(d, d, ZERO);
        for col in 0..d {
            for row in 0..d {
                e[(row, col)] = ONE;
                let out = self.apply(&e);
                let idx = col * d + row;
                for (k, v) in out.iter().enumerate() {
                    l[(k, idx)] = *v;
                }
                e[(row, col)] = ZERO;
            }
        }
        l
    }

    /// Steady state from the null space of the Liouvillian with unit trace.
    pub fn steady_state(&self) -> Result<DensityOperator> {
        let d = self.basis.dim();
        let mut l = self.superoperator();
        let mut rhs = DVector::from_element(d * d, ZERO);
        // Replace the equation for ρ₀₀ by the trace condition.
        for k in 0..d * d {
            l[(0, k)] = ZERO;
        }
        for i in 0..d {
            l[(0, i * d + i)] = ONE;
        }
        rhs[0] = ONE;
        let v = l
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("Liouvillian steady state".into()))?;
        let m = DMatrix::from_column_slice(d, d, v.as_slice());
        let m = (&m + m.adjoint()) * C::new(0.5, 0.0);
        let tr = m.trace();
        let rho = DensityOperator(m / tr);
        let residual = self.apply(&rho.0).iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !(residual < 1e-12) {
            return Err(Error::NonConvergence { residual });
        }
        rho.check()?;
        Ok(rho)
    }

    /// Evolves ρ over `grid` (ascending, starting at the initial time).
    pub fn evolve(&self, rho0: &DensityOperator, grid: &[f64], opts: &OdeOptions) -> Result<Vec<DensityOperator>> {
        let d = self.basis.dim();
        let l = self.superoperator();
        let y0: Vec<C> = rho0.0.as_slice().to_vec();
        let rhs = |_t: f64, y: &[C], dy: &mut [C]| {
            for (i, out) in dy.iter_mut().enumerate() {
                let mut acc = ZERO;
                for (j, v) in y.iter().enumerate() {
                    acc += l[(i, j)] * v;
                }
                *out = acc;
            }
        };
        let ys = ode::integrate(rhs, &y0, grid, opts)?;
        let mut out = Vec::with_capacity(ys.len());
        for (t, y) in grid.iter().zip(ys) {
            let rho = DensityOperator(DMatrix::from_column_slice(d, d, &y));
            rho.check().map_err(|e| Error::IntegrationFailure {
                time: *t,
                reason: format!("density operator invariants violated: {e}"),
            })?;
            out.push(rho);
        }
        Ok(out)
    }
}

/// Right-hand side of the master equation for a single ρ.
pub fn liouvillian_apply(params: &RateParams, atoms: &[Emitter], rho: &DMatrix<C>) -> Result<DMatrix<C>> {
    let me = MasterEquation::new(params, atoms)?;
    let d = me.basis.dim();
    if rho.nrows() != d || rho.ncols() != d {
        return Err(Error::InvalidParameter(format!(
            "density matrix is {}x{}, basis dimension is {d}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    Ok(me.apply(rho))
}

pub fn steady_state(params: &RateParams, atoms: &[Emitter]) -> Result<DensityOperator> {
    MasterEquation::new(params, atoms)?.steady_state()
}

/// g²(τ) by quantum regression of the photon-subtracted steady state.
pub fn g2_exact(params: &RateParams, atoms: &[Emitter], tau: &[f64]) -> Result<CorrelationTrace> {
    let me = MasterEquation::new(params, atoms)?;
    let ss = me.steady_state()?;
    let n_ss = ss.expectation(&me.number).re;
    if !(n_ss > 1e-15) {
        return Err(Error::UndefinedCorrelation(format!("steady photon number {n_ss:e}")));
    }
    let a = &me.annihilation;
    let collapsed = DensityOperator(a * &ss.0 * a.adjoint() / C::new(n_ss, 0.0));
    let starts_at_zero = tau.first() == Some(&0.0);
    let mut grid = Vec::with_capacity(tau.len() + 1);
    if !starts_at_zero {
        grid.push(0.0);
    }
    grid.extend_from_slice(tau);
    let mut states = me.evolve(&collapsed, &grid, &OdeOptions::tight())?;
    if !starts_at_zero {
        states.remove(0);
    }
    let g2 = states.iter().map(|r| r.expectation(&me.number).re / n_ss).collect();
    Ok(CorrelationTrace::deterministic(tau.to_vec(), g2))
}

/// Field amplitude of |1;∅⟩ evolved under the non-Hermitian one-excitation
/// block with every atom tracked individually. Requires ε = 0.
pub fn nonmarkov_exact_kernel(params: &RateParams, atoms: &[Emitter], t_grid: &[f64]) -> Result<Vec<C>> {
    params.validate()?;
    if params.eps != 0.0 {
        return Err(Error::InvalidParameter("exact kernel requires eps = 0".into()));
    }
    if atoms.len() > MAX_ATOMS {
        return Err(Error::OracleScope(format!(
            "{} atoms requested, at most {MAX_ATOMS} supported",
            atoms.len()
        )));
    }
    let n = 1 + atoms.len();
    let mut h = DMatrix::from_element(n, n, ZERO);
    h[(0, 0)] = -C::new(params.kappa, params.delta_c);
    for (j, atom) in atoms.iter().enumerate() {
        h[(0, j + 1)] = C::new(atom.coupling, 0.0);
        h[(j + 1, 0)] = C::new(-atom.coupling, 0.0);
        h[(j + 1, j + 1)] = -C::new(0.5 * params.gamma, atom.detuning);
    }
    Ok(t_grid
        .iter()
        .map(|&t| (&h * C::new(t, 0.0)).exp()[(0, 0)])
        .collect())
}

/// What a [`CheckCase`] compares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckKind {
    /// Fast g² against [`g2_exact`].
    G2,
    /// Fast one-excitation response against a single class of coupling
    /// sqrt(Σg²) at zero detuning.
    BrightMode,
}

/// One entry of the fast-versus-reference comparison matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckCase {
    pub name: &'static str,
    pub kind: CheckKind,
    pub params: RateParams,
    pub atoms: Vec<Emitter>,
    pub grid: Vec<f64>,
    pub tolerance: f64,
}

impl CheckCase {
    /// Largest absolute deviation between the fast path and the reference.
    pub fn max_abs_diff(&self) -> Result<f64> {
        let medium = Medium::new(self.atoms.clone())?;
        match self.kind {
            CheckKind::G2 => {
                let fast = dynamics::g2_regression(&self.params, &medium, &self.grid)?;
                let exact = g2_exact(&self.params, &self.atoms, &self.grid)?;
                Ok(max_diff(&fast.g2, &exact.g2))
            }
            CheckKind::BrightMode => {
                let g = self.atoms.iter().map(|a| a.coupling * a.coupling).sum::<f64>().sqrt();
                let single = Medium::new(vec![Emitter::atom(g, 0.0)])?;
                let many = dynamics::response_kernel(&self.params, medium.classes(), &self.grid)?;
                let one = dynamics::response_kernel(&self.params, single.classes(), &self.grid)?;
                let mut worst = many.iter().zip(&one).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                let a = dynamics::steady_one_excitation(&self.params, medium.classes()).field;
                let b = dynamics::steady_one_excitation(&self.params, single.classes()).field;
                worst = worst.max((a - b).norm() / b.norm());
                Ok(worst)
            }
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tolerance of the g² comparisons at ε/κ = 0.01.
pub const G2_TOLERANCE: f64 = 5e-3;
/// Tolerance of the one-excitation bright-mode comparison.
pub const BRIGHT_MODE_TOLERANCE: f64 = 1e-10;

/// The standard comparison matrix: up to three atoms with unequal couplings
/// and detunings up to 2.5κ, at ε/κ = 0.01 and paper rates.
pub fn check_matrix() -> Vec<CheckCase> {
    let base = RateParams::paper().with_eps_over_kappa(0.01);
    let k = base.kappa;
    let g = base.g_max;
    let tau: Vec<f64> = (0..=80).map(|i| i as f64 * 0.0125).collect();
    let at = |list: &[(f64, f64)]| list.iter().map(|&(c, d)| Emitter::atom(c, d)).collect::<Vec<_>>();
    let g2 = |name, params: RateParams, atoms: Vec<Emitter>| CheckCase {
        name,
        kind: CheckKind::G2,
        params,
        atoms,
        grid: tau.clone(),
        tolerance: G2_TOLERANCE,
    };
    vec![
        g2("one_atom_resonant", base, at(&[(g, 0.0)])),
        g2("one_atom_detuned", base, at(&[(0.8 * g, 1.5 * k)])),
        g2("two_atoms_equal_split", base, at(&[(g / 2f64.sqrt(), 0.0), (g / 2f64.sqrt(), 0.0)])),
        g2("two_atoms_3_4", base, at(&[(3.0, 0.0), (4.0, 0.0)])),
        g2("two_atoms_detuned", base, at(&[(g, 0.5 * k), (0.6 * g, -2.5 * k)])),
        g2(
            "three_atoms_mixed",
            base.with_detunings(0.3 * k, 0.0),
            at(&[(g, 0.0), (0.7 * g, 1.0 * k), (0.4 * g, -2.0 * k)]),
        ),
        g2("three_atoms_resonant", base, at(&[(0.9 * g, 0.0), (0.5 * g, 0.0), (0.3 * g, 0.0)])),
        CheckCase {
            name: "bright_mode_3_4",
            kind: CheckKind::BrightMode,
            params: base,
            atoms: at(&[(3.0, 0.0), (4.0, 0.0)]),
            grid: tau.clone(),
            tolerance: BRIGHT_MODE_TOLERANCE,
        },
    ]
}
