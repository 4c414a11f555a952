//! Low-rank parameter deltas and their linear merging.
//!
//! A [`LowRankDelta`] holds one `(B, A)` factor pair per adaptation site, so
//! the dense update at a site is `B · A`. Merging a set of deltas produces a
//! [`MergedDelta`], which keeps the weighted factor pairs instead of summing
//! them into a dense matrix; materialization happens on demand.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Shape of one adaptation site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteShape {
    pub id: String,
    pub d_out: usize,
    pub d_in: usize,
}

/// Factor pair for a single site: `B` is `d_out × r`, `A` is `r × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFactors {
    pub id: String,
    pub b: Matrix,
    pub a: Matrix,
}

impl SiteFactors {
    pub fn new(id: impl Into<String>, b: Matrix, a: Matrix) -> Self {
        Self { id: id.into(), b, a }
    }

    pub fn shape(&self) -> SiteShape {
        SiteShape {
            id: self.id.clone(),
            d_out: self.b.nrows(),
            d_in: self.a.ncols(),
        }
    }
}

/// One user's adapter: an ordered list of per-site factor pairs sharing a rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    sites: Vec<SiteFactors>,
    rank: usize,
}

impl LowRankDelta {
    pub fn new(sites: Vec<SiteFactors>) -> Result<Self> {
        let first = sites
            .first()
            .ok_or_else(|| Error::layout("adapter has no sites"))?;
        let rank = first.b.ncols();
        if rank == 0 {
            return Err(Error::layout("adapter rank must be at least 1"));
        }
        for (i, site) in sites.iter().enumerate() {
            if site.b.ncols() != rank || site.a.nrows() != rank {
                return Err(Error::layout(format!(
                    "site `{}` has factors {}x{} / {}x{}, expected rank {rank}",
                    site.id,
                    site.b.nrows(),
                    site.b.ncols(),
                    site.a.nrows(),
                    site.a.ncols()
                )));
            }
            if sites[..i].iter().any(|s| s.id == site.id) {
                return Err(Error::layout(format!("duplicate site `{}`", site.id)));
            }
        }
        Ok(Self { sites, rank })
    }

    /// Adapter whose `B` factors are all zero.
    pub fn zeros(layout: &[SiteShape], rank: usize) -> Result<Self> {
        Self::new(
            layout
                .iter()
                .map(|s| {
                    SiteFactors::new(
                        s.id.clone(),
                        Matrix::zeros(s.d_out, rank),
                        Matrix::zeros(rank, s.d_in),
                    )
                })
                .collect(),
        )
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn sites(&self) -> &[SiteFactors] {
        &self.sites
    }

    pub fn layout(&self) -> Vec<SiteShape> {
        self.sites.iter().map(SiteFactors::shape).collect()
    }

    pub fn site(&self, id: &str) -> Result<&SiteFactors> {
        self.sites
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSite(id.to_string()))
    }

    /// Same factors with every `B` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sites: self
                .sites
                .iter()
                .map(|s| SiteFactors::new(s.id.clone(), &s.b * c, s.a.clone()))
                .collect(),
            rank: self.rank,
        }
    }
}

/// Anything that can be expanded into a dense update per site.
pub trait Materialize {
    fn layout(&self) -> Vec<SiteShape>;

    fn materialize(&self, site_id: &str) -> Result<Matrix>;
}

impl Materialize for LowRankDelta {
    fn layout(&self) -> Vec<SiteShape> {
        LowRankDelta::layout(self)
    }

    fn materialize(&self, site_id: &str) -> Result<Matrix> {
        let site = self.site(site_id)?;
        Ok(&site.b * &site.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One scalar per adapter.
    Module,
    /// One scalar per adapter per site, indexed by site position.
    Site,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Scalar(f64),
    PerSite(Vec<f64>),
}

impl Coefficient {
    fn at(&self, site_index: usize) -> f64 {
        match self {
            Coefficient::Scalar(w) => *w,
            Coefficient::PerSite(ws) => ws[site_index],
        }
    }

    fn scaled(&self, c: f64) -> Self {
        match self {
            Coefficient::Scalar(w) => Coefficient::Scalar(w * c),
            Coefficient::PerSite(ws) => Coefficient::PerSite(ws.iter().map(|w| w * c).collect()),
        }
    }
}

/// Interpolation coefficients keyed by sharer, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    entries: Vec<(String, Coefficient)>,
    granularity: Granularity,
}

impl MergeWeights {
    pub fn module_level<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            entries: entries
                .into_iter()
                .map(|(id, w)| (id.into(), Coefficient::Scalar(w)))
                .collect(),
            granularity: Granularity::Module,
        }
    }

    pub fn site_level<I, S>(entries: I, n_sites: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let entries: Vec<_> = entries
            .into_iter()
            .map(|(id, ws)| (id.into(), ws))
            .collect();
        if let Some((id, ws)) = entries.iter().find(|(_, ws)| ws.len() != n_sites) {
            return Err(Error::layout(format!(
                "sharer `{id}` has {} site weights, expected {n_sites}",
                ws.len()
            )));
        }
        Ok(Self {
            entries: entries
                .into_iter()
                .map(|(id, ws)| (id, Coefficient::PerSite(ws)))
                .collect(),
            granularity: Granularity::Site,
        })
    }

    /// Decode a flat optimizer vector. Module level expects one value per
    /// sharer; site level expects `n_sites` consecutive values per sharer.
    pub fn from_flat(
        sharers: &[String],
        flat: &[f64],
        granularity: Granularity,
        n_sites: usize,
    ) -> Result<Self> {
        match granularity {
            Granularity::Module => {
                if flat.len() != sharers.len() {
                    return Err(Error::layout(format!(
                        "{} weights for {} sharers",
                        flat.len(),
                        sharers.len()
                    )));
                }
                Ok(Self::module_level(
                    sharers.iter().cloned().zip(flat.iter().copied()),
                ))
            }
            Granularity::Site => {
                if flat.len() != sharers.len() * n_sites {
                    return Err(Error::layout(format!(
                        "{} weights for {} sharers x {n_sites} sites",
                        flat.len(),
                        sharers.len()
                    )));
                }
                Self::site_level(
                    sharers
                        .iter()
                        .cloned()
                        .zip(flat.chunks(n_sites.max(1)).map(<[f64]>::to_vec)),
                    n_sites,
                )
            }
        }
    }

    /// Optimizer dimension for `k` sharers.
    pub fn dimension(k: usize, granularity: Granularity, n_sites: usize) -> usize {
        match granularity {
            Granularity::Module => k,
            Granularity::Site => k * n_sites,
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn entries(&self) -> &[(String, Coefficient)] {
        &self.entries
    }

    pub fn sharer_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(id, w)| (id.clone(), w.scaled(c)))
                .collect(),
            granularity: self.granularity,
        }
    }

    /// Flatten back into optimizer order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, w)| match w {
                Coefficient::Scalar(x) => vec![*x],
                Coefficient::PerSite(xs) => xs.clone(),
            })
            .collect()
    }
}

pub type AdapterSet = BTreeMap<String, Arc<LowRankDelta>>;

/// Weighted list of factor pairs; never summed into a re-factored adapter.
#[derive(Debug, Clone)]
pub struct MergedDelta {
    layout: Vec<SiteShape>,
    /// `(per-site weights, adapter)` for each merged sharer.
    terms: Vec<(String, Vec<f64>, Arc<LowRankDelta>)>,
}

impl MergedDelta {
    pub fn terms(&self) -> impl Iterator<Item = (&str, &[f64], &LowRankDelta)> {
        self.terms
            .iter()
            .map(|(id, w, d)| (id.as_str(), w.as_slice(), d.as_ref()))
    }
}

impl Materialize for MergedDelta {
    fn layout(&self) -> Vec<SiteShape> {
        self.layout.clone()
    }

    fn materialize(&self, site_id: &str) -> Result<Matrix> {
        let idx = self
            .layout
            .iter()
            .position(|s| s.id == site_id)
            .ok_or_else(|| Error::UnknownSite(site_id.to_string()))?;
        let shape = &self.layout[idx];
        let mut out = Matrix::zeros(shape.d_out, shape.d_in);
        for (_, weights, delta) in &self.terms {
            let site = &delta.sites()[idx];
            let w = weights[idx];
            if w != 0.0 {
                out.gemm(w, &site.b, &site.a, 1.0);
            }
        }
        Ok(out)
    }
}

/// Linear interpolation `Σ_s w_s · (B_s A_s)` over the sharers named in `weights`.
pub fn merge_adapters(weights: &MergeWeights, adapters: &AdapterSet) -> Result<MergedDelta> {
    if weights.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut layout: Option<(Vec<SiteShape>, usize)> = None;
    let mut terms = Vec::with_capacity(weights.len());
    for (id, coef) in weights.entries() {
        let delta = adapters
            .get(id)
            .ok_or_else(|| Error::layout(format!("no adapter for sharer `{id}`")))?;
        let this_layout = delta.layout();
        match &layout {
            None => layout = Some((this_layout, delta.rank())),
            Some((l, r)) => {
                if *l != this_layout || *r != delta.rank() {
                    return Err(Error::layout(format!(
                        "adapter `{id}` does not share the site layout of the first adapter"
                    )));
                }
            }
        }
        let n_sites = delta.sites().len();
        if let Coefficient::PerSite(ws) = coef {
            if ws.len() != n_sites {
                return Err(Error::layout(format!(
                    "sharer `{id}` has {} site weights for {n_sites} sites",
                    ws.len()
                )));
            }
        }
        let per_site = (0..n_sites).map(|i| coef.at(i)).collect();
        terms.push((id.clone(), per_site, Arc::clone(delta)));
    }
    let (layout, _) = layout.expect("non-empty weights");
    Ok(MergedDelta { layout, terms })
}

/// Dense parameters, one matrix per site. Used both for frozen base weights
/// and for the effective weights after an update has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    sites: Vec<(String, Matrix)>,
}

pub type BaseParams = DenseParams;
pub type EffectiveParams = DenseParams;

impl DenseParams {
    pub fn new(sites: Vec<(String, Matrix)>) -> Result<Self> {
        for (i, (id, _)) in sites.iter().enumerate() {
            if sites[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::layout(format!("duplicate site `{id}`")));
            }
        }
        Ok(Self { sites })
    }

    pub fn single(id: impl Into<String>, w: Matrix) -> Self {
        Self {
            sites: vec![(id.into(), w)],
        }
    }

    pub fn sites(&self) -> &[(String, Matrix)] {
        &self.sites
    }

    pub fn layout(&self) -> Vec<SiteShape> {
        self.sites
            .iter()
            .map(|(id, w)| SiteShape {
                id: id.clone(),
                d_out: w.nrows(),
                d_in: w.ncols(),
            })
            .collect()
    }

    pub fn site(&self, id: &str) -> Result<&Matrix> {
        self.sites
            .iter()
            .find(|(s, _)| s == id)
            .map(|(_, w)| w)
            .ok_or_else(|| Error::UnknownSite(id.to_string()))
    }
}

/// `W = W0 + materialize(delta)` at every site.
pub fn apply_delta<D: Materialize + ?Sized>(base: &BaseParams, delta: &D) -> Result<EffectiveParams> {
    let layout = delta.layout();
    if layout != base.layout() {
        return Err(Error::layout(
            "delta site layout differs from base parameters",
        ));
    }
    let sites = base
        .sites
        .iter()
        .map(|(id, w0)| Ok((id.clone(), w0 + delta.materialize(id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DenseParams { sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_delta(id: &str, b: f64, a: f64) -> LowRankDelta {
        LowRankDelta::new(vec![SiteFactors::new(
            id,
            Matrix::from_element(1, 1, b),
            Matrix::from_element(1, 1, a),
        )])
        .unwrap()
    }

    fn set(pairs: Vec<(&str, LowRankDelta)>) -> AdapterSet {
        pairs
            .into_iter()
            .map(|(id, d)| (id.to_string(), Arc::new(d)))
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_update() {
        let adapters = set(vec![
            ("s1", scalar_delta("w", 2.0, 1.0)),
            ("s2", scalar_delta("w", 4.0, 1.0)),
        ]);
        let w = MergeWeights::module_level([("s1", 0.0), ("s2", 0.0)]);
        let merged = merge_adapters(&w, &adapters).unwrap();
        assert_eq!(merged.materialize("w").unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn unit_weight_reproduces_adapter() {
        let d = LowRankDelta::new(vec![SiteFactors::new(
            "w",
            Matrix::from_row_slice(2, 1, &[1.5, -2.0]),
            Matrix::from_row_slice(1, 3, &[0.5, 1.0, 3.0]),
        )])
        .unwrap();
        let adapters = set(vec![("s1", d.clone())]);
        let merged =
            merge_adapters(&MergeWeights::module_level([("s1", 1.0)]), &adapters).unwrap();
        assert_eq!(merged.materialize("w").unwrap(), d.materialize("w").unwrap());
    }

    #[test]
    fn half_half_merge_of_scalars() {
        let adapters = set(vec![
            ("s1", scalar_delta("w", 2.0, 1.0)),
            ("s2", scalar_delta("w", 4.0, 1.0)),
        ]);
        let w = MergeWeights::module_level([("s1", 0.5), ("s2", 0.5)]);
        let merged = merge_adapters(&w, &adapters).unwrap();
        assert_eq!(merged.materialize("w").unwrap(), Matrix::from_element(1, 1, 3.0));
    }

    #[test]
    fn rank_one_outer_product() {
        let d = LowRankDelta::new(vec![SiteFactors::new(
            "w",
            Matrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )])
        .unwrap();
        assert_eq!(
            d.materialize("w").unwrap(),
            Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        );
        let zero = LowRankDelta::zeros(&d.layout(), 2).unwrap();
        assert_eq!(zero.materialize("w").unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn unknown_site_is_lookup_error() {
        let d = scalar_delta("w", 1.0, 1.0);
        assert!(matches!(d.materialize("nope"), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn empty_selection_rejected() {
        let adapters = set(vec![("s1", scalar_delta("w", 1.0, 1.0))]);
        let w = MergeWeights::module_level(Vec::<(String, f64)>::new());
        assert!(matches!(
            merge_adapters(&w, &adapters),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let adapters = set(vec![
            ("s1", scalar_delta("w", 1.0, 1.0)),
            ("s2", scalar_delta("v", 1.0, 1.0)),
        ]);
        let w = MergeWeights::module_level([("s1", 0.5), ("s2", 0.5)]);
        assert!(matches!(merge_adapters(&w, &adapters), Err(Error::Layout(_))));
    }

    #[test]
    fn rank_mismatch_rejected_at_construction() {
        let bad = LowRankDelta::new(vec![SiteFactors::new(
            "w",
            Matrix::zeros(2, 2),
            Matrix::zeros(1, 3),
        )]);
        assert!(matches!(bad, Err(Error::Layout(_))));
    }

    #[test]
    fn apply_adds_to_base() {
        let base = DenseParams::single("w", Matrix::from_element(1, 1, 1.0));
        let adapters = set(vec![
            ("s1", scalar_delta("w", 2.0, 1.0)),
            ("s2", scalar_delta("w", 4.0, 1.0)),
        ]);
        let merged = merge_adapters(
            &MergeWeights::module_level([("s1", 0.5), ("s2", 0.5)]),
            &adapters,
        )
        .unwrap();
        let eff = apply_delta(&base, &merged).unwrap();
        assert_eq!(eff.site("w").unwrap()[(0, 0)], 4.0);

        let zero = LowRankDelta::zeros(&base.layout(), 1).unwrap();
        assert_eq!(apply_delta(&base, &zero).unwrap(), base);
    }

    #[test]
    fn apply_rejects_layout_mismatch() {
        let base = DenseParams::single("w", Matrix::zeros(2, 2));
        let d = scalar_delta("w", 1.0, 1.0);
        assert!(matches!(apply_delta(&base, &d), Err(Error::Layout(_))));
    }

    #[test]
    fn site_level_weights_index_by_position() {
        let two_site = |b: f64| {
            LowRankDelta::new(vec![
                SiteFactors::new("p", Matrix::from_element(1, 1, b), Matrix::from_element(1, 1, 1.0)),
                SiteFactors::new("q", Matrix::from_element(1, 1, b), Matrix::from_element(1, 1, 1.0)),
            ])
            .unwrap()
        };
        let adapters = set(vec![("s1", two_site(1.0)), ("s2", two_site(10.0))]);
        let w = MergeWeights::from_flat(
            &["s1".to_string(), "s2".to_string()],
            &[1.0, 2.0, 3.0, 4.0],
            Granularity::Site,
            2,
        )
        .unwrap();
        let merged = merge_adapters(&w, &adapters).unwrap();
        assert_eq!(merged.materialize("p").unwrap()[(0, 0)], 1.0 + 30.0);
        assert_eq!(merged.materialize("q").unwrap()[(0, 0)], 2.0 + 40.0);
        assert_eq!(w.to_flat(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(MergeWeights::site_level([("s1", vec![1.0])], 2).is_err());
    }
}
