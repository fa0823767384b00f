//! Self-guided data expansion: pick a tool for a triplet, then render a new image
//! and re-derive its answer from the new scene.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{item_rng, sample_scene, Scene, ShapeClass, WorldConfig};
use super::Triplet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Generate,
    Edit,
    ObjectSwap,
}

/// Whole-image edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GlobalTransform {
    /// Intensity remap `v ↦ v^gamma`; `gamma = 1` is the identity.
    Gamma { gamma: f64 },
    FlipHorizontal,
    FlipVertical,
}

/// Tool plus its seeded instruction; the variant fixes which fields exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolChoice {
    /// Fresh scene with the same shape count.
    Generate { seed: u64 },
    Edit { transform: GlobalTransform },
    /// Replace the shape at `target` with a shape of class `new_class`.
    ObjectSwap { target: usize, new_class: ShapeClass },
}

impl ToolChoice {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolChoice::Generate { .. } => ToolKind::Generate,
            ToolChoice::Edit { .. } => ToolKind::Edit,
            ToolChoice::ObjectSwap { .. } => ToolKind::ObjectSwap,
        }
    }
}

const GAMMAS: [f64; 4] = [0.5, 0.75, 1.5, 2.0];

/// Seeded tool choice for `triplet`.
pub fn propose_tool(triplet: &Triplet, seed: u64) -> ToolChoice {
    let mut rng = item_rng(seed, 0);
    match rng.gen_range(0..3) {
        0 => ToolChoice::Generate { seed: rng.gen() },
        1 => ToolChoice::Edit {
            transform: match rng.gen_range(0..3) {
                0 => GlobalTransform::Gamma {
                    gamma: GAMMAS[rng.gen_range(0..GAMMAS.len())],
                },
                1 => GlobalTransform::FlipHorizontal,
                _ => GlobalTransform::FlipVertical,
            },
        },
        _ => {
            let target = rng.gen_range(0..triplet.scene.shapes.len());
            let old = triplet.scene.shapes[target].class;
            let others: Vec<ShapeClass> =
                ShapeClass::ALL.into_iter().filter(|c| *c != old).collect();
            ToolChoice::ObjectSwap {
                target,
                new_class: others[rng.gen_range(0..others.len())],
            }
        }
    }
}

fn remap(v: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        v
    } else {
        v.powf(gamma)
    }
}

fn transformed_scene(scene: &Scene, choice: &ToolChoice) -> Result<Scene> {
    let mut s = scene.clone();
    match *choice {
        ToolChoice::Generate { seed } => {
            let cfg = WorldConfig {
                width: scene.width,
                height: scene.height,
                ..WorldConfig::default()
            };
            let mut rng = item_rng(seed, 0);
            s = sample_scene(&mut rng, &cfg, scene.shapes.len());
        }
        ToolChoice::Edit { transform } => match transform {
            GlobalTransform::Gamma { gamma } => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
                }
                s.background = remap(s.background, gamma);
                for sh in &mut s.shapes {
                    sh.intensity = remap(sh.intensity, gamma);
                }
            }
            GlobalTransform::FlipHorizontal => {
                for sh in &mut s.shapes {
                    sh.cx = s.width - 1 - sh.cx;
                }
            }
            GlobalTransform::FlipVertical => {
                for sh in &mut s.shapes {
                    sh.cy = s.height - 1 - sh.cy;
                }
            }
        },
        ToolChoice::ObjectSwap { target, new_class } => {
            let sh = s.shapes.get_mut(target).ok_or_else(|| {
                Error::Lookup(format!("object swap target {target} not in scene"))
            })?;
            sh.class = new_class;
        }
    }
    Ok(s)
}

/// Renders the edited scene and regenerates the answer for the same question.
pub fn apply_tool(triplet: &Triplet, choice: &ToolChoice) -> Result<Triplet> {
    let scene = transformed_scene(&triplet.scene, choice)?;
    let image = scene.render()?;
    let suffix = match choice.kind() {
        ToolKind::Generate => "gen",
        ToolKind::Edit => "edit",
        ToolKind::ObjectSwap => "swap",
    };
    Ok(Triplet {
        id: format!("{}-{suffix}", triplet.id),
        question: triplet.question,
        q: triplet.q.clone(),
        a: triplet.question.answer(&scene),
        scene,
        image,
    })
}
