//! Distills the two-model teacher into one shared encoder, finetunes it and
//! evaluates each model on the dev questions.

use minrr::harness::commands::{
    cmd_distill, cmd_evaluate, cmd_finetune, cmd_gen_synthetic, cmd_train_retriever,
    cmd_train_teacher, EvalSource, ModelChoice, Workspace,
};
use minrr::harness::PipelineConfig;

fn main() -> minrr::Result<()> {
    let ws = Workspace::new(
        std::env::temp_dir().join("minrr-teacher-student"),
        PipelineConfig::default(),
    );
    cmd_gen_synthetic(&ws)?;
    println!("{}", cmd_train_teacher(&ws)?);
    // The student starts from a retriever trained with in-batch negatives.
    println!("{}", cmd_train_retriever(&ws)?);
    println!("{}", cmd_distill(&ws)?);
    let distilled = cmd_evaluate(
        &ws,
        &EvalSource::Model {
            choice: ModelChoice::Unified,
            index: None,
        },
    )?;
    println!("distilled\n{distilled}");
    println!("{}", cmd_finetune(&ws)?);
    Ok(())
}
