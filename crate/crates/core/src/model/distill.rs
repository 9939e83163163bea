use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Graph, Tensor, Var};

/// Hard-label distillation objective on a single set of student logits:
/// `½·CE(ψ(Z_s), y) + ½·CE(ψ(Z_s), argmax Z_t)`, averaged over rows.
pub fn hard_distillation_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    labels: &[usize],
    teacher_logits: &Tensor<T>,
) -> Result<Var> {
    let (rows, classes) = g.value(student_logits).dims2()?;
    if teacher_logits.dims2()? != (rows, classes) {
        return Err(Error::Contract(format!(
            "teacher logits {:?} do not match student logits {:?}",
            teacher_logits.shape(),
            g.value(student_logits).shape()
        )));
    }
    let teacher_labels: Vec<usize> = (0..rows).map(|i| argmax(teacher_logits.row(i))).collect();
    let truth = g.cross_entropy(student_logits, labels)?;
    let taught = g.cross_entropy(student_logits, &teacher_labels)?;
    let a = g.scale(truth, T::c(0.5));
    let b = g.scale(taught, T::c(0.5));
    g.add(a, b)
}
