#![no_main]

use fabric_core::model::FieldKind;
use fabric_core::table::Table;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = Table::from_csv(data) {
        // Inferred cells print back to text that infers to the same value.
        let again = Table::from_csv(&table.to_csv()).unwrap();
        assert_eq!(again, table);
    }
    let _ = Table::from_csv_typed(data, &|column| match column.len() % 4 {
        0 => Some(FieldKind::Integer),
        1 => Some(FieldKind::Float),
        2 => Some(FieldKind::Timestamp),
        _ => None,
    });
});
