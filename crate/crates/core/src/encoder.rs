//! Signal-guided factorized-attention encoder and the map-feature cache.
//!
//! Map polygons are encoded once (LP-A over their own sample points, then
//! LL-A over neighbouring polygons) in their own entry frames, so the result
//! does not depend on any agent and can be shared by every agent token, every
//! frame and both views.

use std::collections::HashMap;

use cooptraj_tensor::{FourierEmbed, ParamStore, Result, Tape, Var};

use crate::blocks::RelAttnBlock;
use crate::config::{AblationFlags, EncoderConfig};
use crate::prepare::{
    PreparedMap, PreparedView, AGENT_CATEGORICAL, AGENT_FEATURES, POINT_CATEGORICAL, POINT_FEATURES,
    POLY_CATEGORICAL, POLY_FEATURES,
};

/// Encoded polygon features living on one tape (i.e. for one set of weights).
///
/// With caching enabled each distinct map is built exactly once per tape;
/// with caching disabled every consumer triggers its own rebuild, which is
/// what an agent-centric encoder has to do.
#[derive(Debug, Default)]
pub struct MapFeatureCache {
    pub enabled: bool,
    entries: HashMap<u64, Var>,
    pub recomputes: usize,
    pub hits: usize,
    pub misses: usize,
}

impl MapFeatureCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    /// Add another cache's counters (entries are tape-bound and not merged).
    pub fn absorb_counts(&mut self, other: &MapFeatureCache) {
        self.recomputes += other.recomputes;
        self.hits += other.hits;
        self.misses += other.misses;
    }
}

#[derive(Debug, Clone)]
pub struct MapEncoder {
    pub point_embed: FourierEmbed,
    pub poly_embed: FourierEmbed,
    pub lp_a: RelAttnBlock,
    pub ll_a: RelAttnBlock,
}

impl MapEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            point_embed: FourierEmbed::new(
                store,
                "map.point",
                POINT_FEATURES,
                POINT_CATEGORICAL,
                cfg.n_freq,
                cfg.freq_std,
                cfg.hidden,
                cfg.d_model,
            ),
            poly_embed: FourierEmbed::new(
                store,
                "map.polygon",
                POLY_FEATURES,
                POLY_CATEGORICAL,
                cfg.n_freq,
                cfg.freq_std,
                cfg.hidden,
                cfg.d_model,
            ),
            lp_a: RelAttnBlock::new(store, "map.lp_a", cfg)?,
            ll_a: RelAttnBlock::new(store, "map.ll_a", cfg)?,
        })
    }

    /// Uncached build: `[polygons x d]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, map: &PreparedMap) -> Result<Var> {
        let pts = tape.constant(map.n_points, POINT_FEATURES, map.point_features.clone());
        let pcat = tape.constant(map.n_points, POINT_CATEGORICAL, map.point_categorical.clone());
        let pts = self.point_embed.forward(tape, store, pts, Some(pcat))?;
        let n = map.len();
        let poly = tape.constant(n, POLY_FEATURES, map.poly_features.clone());
        let cat = tape.constant(n, POLY_CATEGORICAL, map.poly_categorical.clone());
        let poly = self.poly_embed.forward(tape, store, poly, Some(cat))?;
        let poly = self.lp_a.forward(tape, store, poly, pts, &map.lp_edges)?;
        self.ll_a.forward(tape, store, poly, poly, &map.ll_edges)
    }

    /// Cached build; rebuilds on every call when the cache is disabled.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: &PreparedMap,
        cache: &mut MapFeatureCache,
    ) -> Result<Var> {
        if cache.enabled {
            if let Some(&v) = cache.entries.get(&map.key) {
                return Ok(v);
            }
        }
        cache.misses += 1;
        cache.recomputes += 1;
        let v = self.encode(tape, store, map)?;
        if cache.enabled {
            cache.entries.insert(map.key, v);
        }
        Ok(v)
    }

    /// Per-edge polygon rows for an edge set whose sources index polygons.
    /// Without caching the map is rebuilt once per agent track, as an
    /// agent-centric encoder would.
    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        map: &PreparedMap,
        cache: &mut MapFeatureCache,
        edges: &crate::prepare::EdgeSet,
        query_group: impl Fn(usize) -> usize,
    ) -> Result<Var> {
        cache.hits += edges.len();
        if cache.enabled {
            let feats = self.features(tape, store, map, cache)?;
            return tape.gather(feats, &edges.sources);
        }
        let mut parts = Vec::new();
        let mut q = 0;
        while q < edges.n_queries {
            let g = query_group(q);
            let mut end = q;
            while end < edges.n_queries && query_group(end) == g {
                end += 1;
            }
            let lo = edges.offsets[q];
            let hi = edges.offsets[end];
            if hi > lo {
                let feats = self.features(tape, store, map, cache)?;
                parts.push(tape.gather(feats, &edges.sources[lo..hi])?);
            }
            q = end;
        }
        tape.concat_rows(&parts)
    }
}

/// One encoder round: ST-A -> M-A -> SS-A.
#[derive(Debug, Clone)]
pub struct EncoderRound {
    pub st_a: RelAttnBlock,
    pub m_a: RelAttnBlock,
    pub ss_a: RelAttnBlock,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub map: MapEncoder,
    pub agent_embed: FourierEmbed,
    pub rounds: Vec<EncoderRound>,
    pub flags: AblationFlags,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, flags: &AblationFlags) -> Result<Self> {
        let map = MapEncoder::new(store, cfg)?;
        let agent_embed = FourierEmbed::new(
            store,
            "agent.embed",
            AGENT_FEATURES,
            AGENT_CATEGORICAL,
            cfg.n_freq,
            cfg.freq_std,
            cfg.hidden,
            cfg.d_model,
        );
        let rounds = (0..cfg.rounds)
            .map(|r| {
                Ok(EncoderRound {
                    st_a: RelAttnBlock::new(store, &format!("enc{r}.st_a"), cfg)?,
                    m_a: RelAttnBlock::new(store, &format!("enc{r}.m_a"), cfg)?,
                    ss_a: RelAttnBlock::new(store, &format!("enc{r}.ss_a"), cfg)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            map,
            agent_embed,
            rounds,
            flags: flags.clone(),
        })
    }

    /// Initial per-slot embeddings `[slots x d]`.
    pub fn embed_agents(&self, tape: &mut Tape, store: &ParamStore, view: &PreparedView) -> Result<Var> {
        let n = view.slots.len();
        let x = tape.constant(n, AGENT_FEATURES, view.features.clone());
        let c = tape.constant(n, AGENT_CATEGORICAL, view.categorical.clone());
        self.agent_embed.forward(tape, store, x, Some(c))
    }

    /// Full token grid of one view. Returns `None` for a view without tokens.
    pub fn encode_view(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &PreparedView,
        map: &PreparedMap,
        cache: &mut MapFeatureCache,
    ) -> Result<Option<Var>> {
        if view.slots.is_empty() {
            return Ok(None);
        }
        let mut x = self.embed_agents(tape, store, view)?;
        for round in &self.rounds {
            if self.flags.use_st_a {
                x = round.st_a.forward(tape, store, x, x, &view.st_edges)?;
            }
            if self.flags.use_m_a && !view.ma_edges.is_empty() {
                let rows = self
                    .map
                    .lookup(tape, store, map, cache, &view.ma_edges, |q| view.slots[q].track)?;
                x = round.m_a.forward_rows(tape, store, x, rows, &view.ma_edges)?;
            }
            if self.flags.use_ss_a {
                x = round.ss_a.forward(tape, store, x, x, &view.ss_edges)?;
            }
        }
        Ok(Some(x))
    }
}
