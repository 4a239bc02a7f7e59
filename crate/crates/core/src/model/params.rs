use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::ArchSpec;
use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![T::zero(); out],
        }
    }

    fn random<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data = (0..out * inp)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Self {
            weight: Matrix::from_vec(out, inp, data).unwrap(),
            bias: vec![T::zero(); out],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![T::zero(); dim],
            beta: vec![T::zero(); dim],
        }
    }
}

/// One pre-norm transformer block. The four linear modules are the
/// prunable ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Block<T> {
    pub fn linear(&self, role: usize) -> &Linear<T> {
        match role {
            0 => &self.qkv,
            1 => &self.proj,
            2 => &self.fc1,
            3 => &self.fc2,
            _ => panic!("block has four prunable modules, asked for {role}"),
        }
    }

    pub fn linear_mut(&mut self, role: usize) -> &mut Linear<T> {
        match role {
            0 => &mut self.qkv,
            1 => &mut self.proj,
            2 => &mut self.fc1,
            3 => &mut self.fc2,
            _ => panic!("block has four prunable modules, asked for {role}"),
        }
    }
}

/// All parameters of the micro-ViT. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<T> {
    pub patch_embed: Linear<T>,
    /// `tokens x embed_dim`
    pub pos_embed: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Name, shape and (for prunable weights) module index of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub prunable: Option<usize>,
}

const ROLE_NAMES: [&str; 4] = ["qkv", "proj", "fc1", "fc2"];

impl<T: Real> VitParams<T> {
    pub fn zeros(arch: &ArchSpec) -> Self {
        let d = arch.embed_dim;
        let h = arch.hidden_dim();
        Self {
            patch_embed: Linear::zeros(d, arch.patch_dim()),
            pos_embed: Matrix::zeros(arch.tokens(), d),
            blocks: (0..arch.blocks)
                .map(|_| Block {
                    ln1: LayerNorm::zeros(d),
                    qkv: Linear::zeros(3 * d, d),
                    proj: Linear::zeros(d, d),
                    ln2: LayerNorm::zeros(d),
                    fc1: Linear::zeros(h, d),
                    fc2: Linear::zeros(d, h),
                })
                .collect(),
            ln_final: LayerNorm::zeros(d),
            head: Linear::zeros(arch.num_classes, d),
        }
    }

    /// Random initialisation: linear weights `N(0, 1/fan_in)`, positional
    /// embedding `N(0, 0.02^2)`, layer norms at identity, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Self {
        let d = arch.embed_dim;
        let h = arch.hidden_dim();
        let patch_embed = Linear::random(d, arch.patch_dim(), rng);
        let pos = Normal::new(0.0, 0.02).unwrap();
        let pos_embed = Matrix::from_vec(
            arch.tokens(),
            d,
            (0..arch.tokens() * d)
                .map(|_| T::from_f64_lossy(pos.sample(rng)))
                .collect(),
        )
        .unwrap();
        let blocks = (0..arch.blocks)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                qkv: Linear::random(3 * d, d, rng),
                proj: Linear::random(d, d, rng),
                ln2: LayerNorm::identity(d),
                fc1: Linear::random(h, d, rng),
                fc2: Linear::random(d, h, rng),
            })
            .collect();
        Self {
            patch_embed,
            pos_embed,
            blocks,
            ln_final: LayerNorm::identity(d),
            head: Linear::random(arch.num_classes, d, rng),
        }
    }

    /// Weight matrix of prunable module `layer` (block-major, qkv/proj/fc1/fc2).
    pub fn prunable(&self, layer: usize) -> &Matrix<T> {
        &self.blocks[layer / 4].linear(layer % 4).weight
    }

    pub fn prunable_mut(&mut self, layer: usize) -> &mut Matrix<T> {
        &mut self.blocks[layer / 4].linear_mut(layer % 4).weight
    }

    pub fn num_prunable(&self) -> usize {
        4 * self.blocks.len()
    }

    /// Tensor layout in the fixed order used by `tensors` and `tensors_mut`.
    pub fn specs(arch: &ArchSpec) -> Vec<TensorSpec> {
        let d = arch.embed_dim;
        let h = arch.hidden_dim();
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, prunable: Option<usize>| {
            out.push(TensorSpec {
                name,
                shape,
                prunable,
            })
        };
        push("patch_embed.weight".into(), vec![d, arch.patch_dim()], None);
        push("patch_embed.bias".into(), vec![d], None);
        push("pos_embed".into(), vec![arch.tokens(), d], None);
        for b in 0..arch.blocks {
            push(format!("blocks.{b}.ln1.gamma"), vec![d], None);
            push(format!("blocks.{b}.ln1.beta"), vec![d], None);
            let shapes = [(3 * d, d), (d, d), (h, d), (d, h)];
            for (role, (rows, cols)) in shapes.into_iter().enumerate() {
                if role == 2 {
                    push(format!("blocks.{b}.ln2.gamma"), vec![d], None);
                    push(format!("blocks.{b}.ln2.beta"), vec![d], None);
                }
                let name = ROLE_NAMES[role];
                push(
                    format!("blocks.{b}.{name}.weight"),
                    vec![rows, cols],
                    Some(4 * b + role),
                );
                push(format!("blocks.{b}.{name}.bias"), vec![rows], None);
            }
        }
        push("ln_final.gamma".into(), vec![d], None);
        push("ln_final.beta".into(), vec![d], None);
        push("head.weight".into(), vec![arch.num_classes, d], None);
        push("head.bias".into(), vec![arch.num_classes], None);
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            self.patch_embed.weight.as_slice(),
            &self.patch_embed.bias,
            self.pos_embed.as_slice(),
        ];
        for b in &self.blocks {
            out.push(&b.ln1.gamma);
            out.push(&b.ln1.beta);
            out.push(b.qkv.weight.as_slice());
            out.push(&b.qkv.bias);
            out.push(b.proj.weight.as_slice());
            out.push(&b.proj.bias);
            out.push(&b.ln2.gamma);
            out.push(&b.ln2.beta);
            out.push(b.fc1.weight.as_slice());
            out.push(&b.fc1.bias);
            out.push(b.fc2.weight.as_slice());
            out.push(&b.fc2.bias);
        }
        out.push(&self.ln_final.gamma);
        out.push(&self.ln_final.beta);
        out.push(self.head.weight.as_slice());
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.patch_embed.weight.as_mut_slice(),
            &mut self.patch_embed.bias,
            self.pos_embed.as_mut_slice(),
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(b.qkv.weight.as_mut_slice());
            out.push(&mut b.qkv.bias);
            out.push(b.proj.weight.as_mut_slice());
            out.push(&mut b.proj.bias);
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(b.fc1.weight.as_mut_slice());
            out.push(&mut b.fc1.bias);
            out.push(b.fc2.weight.as_mut_slice());
            out.push(&mut b.fc2.bias);
        }
        out.push(&mut self.ln_final.gamma);
        out.push(&mut self.ln_final.beta);
        out.push(self.head.weight.as_mut_slice());
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Whether every tensor matches the layout implied by `arch`.
    pub fn matches(&self, arch: &ArchSpec) -> bool {
        let specs = Self::specs(arch);
        let tensors = self.tensors();
        specs.len() == tensors.len()
            && specs
                .iter()
                .zip(&tensors)
                .all(|(s, t)| s.shape.iter().product::<usize>() == t.len())
            && self.pos_embed.shape() == (arch.tokens(), arch.embed_dim)
            && self.patch_embed.weight.shape() == (arch.embed_dim, arch.patch_dim())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * k;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> VitParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.map(|v| U::from_f64_lossy(v.as_f64())),
            bias: l.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: l.gamma.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            beta: l.beta.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        };
        VitParams {
            patch_embed: lin(&self.patch_embed),
            pos_embed: self.pos_embed.map(|v| U::from_f64_lossy(v.as_f64())),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: ln(&b.ln1),
                    qkv: lin(&b.qkv),
                    proj: lin(&b.proj),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            ln_final: ln(&self.ln_final),
            head: lin(&self.head),
        }
    }
}
