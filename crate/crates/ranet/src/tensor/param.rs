use super::Tensor;

pub type ParamId = usize;

/// What a parameter is used for. Checkpoints store this tag so a loaded file
/// can be sanity-checked against the graph it is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvKernel,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    pub fn as_u8(self) -> u8 {
        match self {
            ParamRole::ConvKernel => 0,
            ParamRole::BnGamma => 1,
            ParamRole::BnBeta => 2,
            ParamRole::LinearWeight => 3,
            ParamRole::LinearBias => 4,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ParamRole::ConvKernel,
            1 => ParamRole::BnGamma,
            2 => ParamRole::BnBeta,
            3 => ParamRole::LinearWeight,
            4 => ParamRole::LinearBias,
            _ => return None,
        })
    }
}

/// A trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub role: ParamRole,
}

/// Running statistics for one batch-norm layer. Variance stays strictly
/// positive: it is initialized to 1 and updated by a convex combination with
/// a (positive) unbiased batch variance plus eps protection at use sites.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Flat store of all parameters and batch-norm running statistics of a graph.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<BnStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor, role: ParamRole) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { value, grad, role });
        self.params.len() - 1
    }

    pub fn add_bn_stats(&mut self, channels: usize) -> usize {
        self.stats.push(BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] });
        self.stats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_stats(&self) -> usize {
        self.stats.len()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn stats(&self, id: usize) -> &BnStats {
        &self.stats[id]
    }

    pub fn stats_mut(&mut self, id: usize) -> &mut BnStats {
        &mut self.stats[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
