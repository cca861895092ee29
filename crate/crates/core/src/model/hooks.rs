use serde::{Deserialize, Serialize};

/// Projection inputs whose sparsity determines skippable weight rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Input to the Q, K and V projections.
    QkvIn,
    /// Input to the up (and gate) projections.
    UpIn,
    /// Input to the down projection.
    DownIn,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::QkvIn, Site::UpIn, Site::DownIn];

    pub fn as_str(&self) -> &'static str {
        match self {
            Site::QkvIn => "qkv_in",
            Site::UpIn => "up_in",
            Site::DownIn => "down_in",
        }
    }
}

/// Values entering an activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreactSite {
    /// FFN activation input (the gate branch for gated FFNs).
    Ffn,
    /// Normalized stream ahead of attention.
    AttnNorm,
    /// Normalized stream ahead of the FFN.
    FfnNorm,
}

/// Callbacks invoked by the forward pass, per layer and position, in order.
///
/// `on_site_input` and `on_preact` are passive. `restrict_down` is the only
/// callback allowed to change values; it runs before `on_site_input` for
/// [`Site::DownIn`].
pub trait Hooks {
    fn on_site_input(&mut self, _layer: usize, _site: Site, _pos: usize, _input: &[f64]) {}

    fn on_preact(&mut self, _layer: usize, _site: PreactSite, _pos: usize, _preact: &[f64]) {}

    fn restrict_down(&mut self, _layer: usize, _pos: usize, _down_in: &mut [f64]) {}
}

impl<H: Hooks + ?Sized> Hooks for &mut H {
    fn on_site_input(&mut self, layer: usize, site: Site, pos: usize, input: &[f64]) {
        (**self).on_site_input(layer, site, pos, input)
    }

    fn on_preact(&mut self, layer: usize, site: PreactSite, pos: usize, preact: &[f64]) {
        (**self).on_preact(layer, site, pos, preact)
    }

    fn restrict_down(&mut self, layer: usize, pos: usize, down_in: &mut [f64]) {
        (**self).restrict_down(layer, pos, down_in)
    }
}

/// Fans every callback out to each member in order.
#[derive(Default)]
pub struct HookSet<'a> {
    members: Vec<&'a mut dyn Hooks>,
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, hook: &'a mut dyn Hooks) -> Self {
        self.members.push(hook);
        self
    }
}

impl Hooks for HookSet<'_> {
    fn on_site_input(&mut self, layer: usize, site: Site, pos: usize, input: &[f64]) {
        for h in &mut self.members {
            h.on_site_input(layer, site, pos, input);
        }
    }

    fn on_preact(&mut self, layer: usize, site: PreactSite, pos: usize, preact: &[f64]) {
        for h in &mut self.members {
            h.on_preact(layer, site, pos, preact);
        }
    }

    fn restrict_down(&mut self, layer: usize, pos: usize, down_in: &mut [f64]) {
        for h in &mut self.members {
            h.restrict_down(layer, pos, down_in);
        }
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl Hooks for NoHooks {}
