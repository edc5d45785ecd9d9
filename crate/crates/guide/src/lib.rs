//! The botforge guide. Each chapter of `book/` is included as a module so
//! its Rust snippets run as doc-tests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(lifecycle, "lifecycle.md");
chapter!(directives, "directives.md");
chapter!(workers, "workers.md");
chapter!(budget, "budget.md");
chapter!(state, "state.md");
chapter!(tbc_db, "tbc-db.md");
chapter!(api, "api.md");
chapter!(running, "running.md");
