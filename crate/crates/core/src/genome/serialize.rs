//! Versioned JSON documents for genomes.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GenomeError, IndividualGenome, ModuleGenome};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenomeDocument<G> {
    pub schema_version: u32,
    pub genome: G,
}

fn to_json<G: Serialize>(genome: &G) -> String {
    let doc = GenomeDocument {
        schema_version: SCHEMA_VERSION,
        genome,
    };
    serde_json::to_string_pretty(&doc).expect("genome serialization is infallible")
}

fn from_json<G: DeserializeOwned>(text: &str) -> Result<G, GenomeError> {
    let doc: GenomeDocument<G> = serde_json::from_str(text).map_err(|e| GenomeError::Document(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(GenomeError::Document(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    Ok(doc.genome)
}

pub fn individual_to_json(genome: &IndividualGenome) -> String {
    to_json(genome)
}

pub fn individual_from_json(text: &str) -> Result<IndividualGenome, GenomeError> {
    from_json(text)
}

pub fn module_to_json(genome: &ModuleGenome) -> String {
    to_json(genome)
}

pub fn module_from_json(text: &str) -> Result<ModuleGenome, GenomeError> {
    from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{HyperparamRanges, InnovationCounter};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn document_uses_stable_field_names() {
        let g = IndividualGenome::new_random(
            4,
            &mut ChaCha8Rng::seed_from_u64(1),
            &HyperparamRanges::default(),
            &InnovationCounter::new(),
            &[1, 2],
            3,
        )
        .unwrap();
        let value: serde_json::Value = serde_json::from_str(&individual_to_json(&g)).unwrap();
        assert_eq!(value["schema_version"], SCHEMA_VERSION);
        for key in ["nodes", "edges", "classifier", "last_layer", "fitness", "age"] {
            assert!(value["genome"].get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn wrong_schema_version_is_refused() {
        let m = ModuleGenome::new_random(
            0,
            &mut ChaCha8Rng::seed_from_u64(1),
            &HyperparamRanges::default(),
            &InnovationCounter::new(),
        );
        let text = module_to_json(&m).replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(module_from_json(&text), Err(GenomeError::Document(_))));
    }

    proptest! {
        #[test]
        fn individual_roundtrip_is_identity(seed in any::<u64>(), fitness in 0.0f64..1.0, age in 0u32..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = IndividualGenome::new_random(
                seed, &mut rng, &HyperparamRanges::default(), &InnovationCounter::new(), &[5, 6, 7], 10,
            ).unwrap();
            g.fitness = fitness;
            g.age = age;
            // arbitrary bit patterns in the Lamarckian store must survive
            for w in g.last_layer.weights.iter_mut().step_by(7) {
                *w = f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff);
            }
            let back = individual_from_json(&individual_to_json(&g)).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn module_roundtrip_is_identity(seed in any::<u64>()) {
            let m = ModuleGenome::new_random(
                seed, &mut ChaCha8Rng::seed_from_u64(seed), &HyperparamRanges::default(), &InnovationCounter::new(),
            );
            prop_assert_eq!(module_from_json(&module_to_json(&m)).unwrap(), m);
        }
    }
}
