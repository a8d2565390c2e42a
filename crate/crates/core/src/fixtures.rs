//! Shared test fixtures.

use crate::types::{RecordDecl, RecordKind, TypeId, TypeUniverse};

/// `struct S {int a[3] @0; char *s @12;} @size(20); struct T {float f; S t @4;}`
pub fn paper_t(u: &mut TypeUniverse) -> (TypeId, TypeId) {
    let int3 = u.array(u.int(), 3).unwrap();
    let char_ptr = u.address_of(u.char());
    let s = u
        .natural_layout(
            &RecordDecl::new(RecordKind::Struct, Some("S"))
                .member_at("a", int3, 0)
                .member_at("s", char_ptr, 12)
                .with_size(20),
        )
        .unwrap();
    let t = u
        .natural_layout(
            &RecordDecl::new(RecordKind::Struct, Some("T"))
                .member_at("f", u.float(), 0)
                .member_at("t", s, 4)
                .with_size(24),
        )
        .unwrap();
    (s, t)
}
