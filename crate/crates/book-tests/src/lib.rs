//! Every chapter of the guide is included here so that `cargo test` runs its
//! Rust listings as doc tests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(models, "models.md");
chapter!(importance, "importance.md");
chapter!(surgery, "surgery.md");
chapter!(training, "training.md");
chapter!(cost_model, "cost-model.md");
chapter!(sweeps, "sweeps.md");
chapter!(file_format, "file-format.md");
