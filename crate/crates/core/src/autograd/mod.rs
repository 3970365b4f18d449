mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_gradcheck, GradcheckReport};
pub use tape::{Gradients, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::sigmoid;
