//! EMA teacher and the expert-ensemble self-distillation loss.
//!
//! The teacher mirrors an MoE layer's parameters and is evaluated as a dense
//! ensemble over all experts. Its outputs are detached targets: the student
//! loss never propagates gradient into the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::moe::{dense_ensemble_forward, MoeLayer};

pub const DEFAULT_BETA: f64 = 0.999;
pub const DEFAULT_LAMBDA_EESD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaTeacher {
    pub mirror: MoeLayer,
    pub beta: f64,
    pub step_count: u64,
}

impl EmaTeacher {
    /// Starts the teacher as a copy of the student.
    pub fn new(student: &MoeLayer, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
        }
        Ok(Self {
            mirror: student.clone(),
            beta,
            step_count: 0,
        })
    }

    /// `p <- beta * p + (1 - beta) * p_student` for every parameter.
    pub fn update(&mut self, student: &MoeLayer) -> Result<()> {
        if !self.mirror.same_shape(student) {
            return Err(Error::ShapeMismatch(
                "teacher and student layers differ in shape".into(),
            ));
        }
        let beta = self.beta;
        if beta != 1.0 {
            for (dst, src) in self.mirror.tensors_mut().into_iter().zip(student.tensors()) {
                for (p, &q) in dst.iter_mut().zip(src) {
                    *p = beta * *p + (1.0 - beta) * q;
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }

    /// Dense all-expert output under the teacher's own router.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        dense_ensemble_forward(&self.mirror, x)
    }
}

/// Functional form of [`EmaTeacher::update`].
pub fn ema_update(teacher: &EmaTeacher, student: &MoeLayer) -> Result<EmaTeacher> {
    let mut next = teacher.clone();
    next.update(student)?;
    Ok(next)
}

/// One teacher per MoE site, in site order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSet {
    pub sites: Vec<usize>,
    pub teachers: Vec<EmaTeacher>,
}

impl TeacherSet {
    pub fn get(&self, site: usize) -> Option<&EmaTeacher> {
        self.sites
            .iter()
            .position(|&s| s == site)
            .map(|i| &self.teachers[i])
    }
}

/// `(1 / T_valid) * sum_{valid t} ||teacher_t - student_t||^2`.
///
/// `teacher_y` is a constant target; see [`eesd_grad`] for the only
/// gradient this loss produces.
pub fn eesd_loss(student_y: &DenseMatrix, teacher_y: &DenseMatrix, mask: &[bool]) -> Result<f64> {
    let valid = check_eesd_inputs(student_y, teacher_y, mask)?;
    let (d, t_count) = student_y.shape();
    let mut sum = 0.0;
    for t in (0..t_count).filter(|&t| mask[t]) {
        for r in 0..d {
            let diff = teacher_y[(r, t)] - student_y[(r, t)];
            sum += diff * diff;
        }
    }
    Ok(sum / valid as f64)
}

/// Gradient of [`eesd_loss`] with respect to the student output. Masked
/// columns are zero.
pub fn eesd_grad(
    student_y: &DenseMatrix,
    teacher_y: &DenseMatrix,
    mask: &[bool],
) -> Result<DenseMatrix> {
    let valid = check_eesd_inputs(student_y, teacher_y, mask)?;
    let (d, t_count) = student_y.shape();
    let scale = -2.0 / valid as f64;
    let mut g = DenseMatrix::zeros(d, t_count);
    for t in (0..t_count).filter(|&t| mask[t]) {
        for r in 0..d {
            g[(r, t)] = scale * (teacher_y[(r, t)] - student_y[(r, t)]);
        }
    }
    Ok(g)
}

fn check_eesd_inputs(student: &DenseMatrix, teacher: &DenseMatrix, mask: &[bool]) -> Result<usize> {
    if student.shape() != teacher.shape() || mask.len() != student.cols() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?}, teacher {:?}, mask {}",
            student.shape(),
            teacher.shape(),
            mask.len()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::AllMasked),
        n => Ok(n),
    }
}
