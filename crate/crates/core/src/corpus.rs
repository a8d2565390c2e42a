//! Sample programs: seeded bugs and clean workloads.

macro_rules! programs {
    ($dir:literal: $($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../corpus/", $dir, "/", $name, ".ir")))),*]
    };
}

/// Programs that each contain one memory or type error (or, for
/// `container_cast` and `legacy_deref`, an idiom that must not be flagged).
pub const BUGS: &[(&str, &str)] = programs!("bugs":
    "account_overflow",
    "subobject_underflow",
    "one_past_end",
    "use_after_free",
    "double_free",
    "reuse_different_type",
    "implicit_cast",
    "bad_downcast",
    "container_cast",
    "prefix_confusion",
    "legacy_deref",
    "fam_overextension",
    "stack_after_return",
);

/// Well-typed programs without memory errors.
pub const CLEAN: &[(&str, &str)] = programs!("clean":
    "list_length",
    "quicksort",
    "points",
    "tagged_union",
    "matrix",
    "strings",
    "tree",
    "hashtable",
    "stack_frames",
    "inheritance",
    "message_buffer",
    "bubble_floats",
);

pub fn get(name: &str) -> Option<&'static str> {
    BUGS.iter().chain(CLEAN).find(|(n, _)| *n == name).map(|(_, s)| *s)
}
