use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use histocon::mil::{class_weights, make_folds, shuffle_labels, split_bags, Bag, MilConfig, MilModel};
use histocon::params::ParamStore;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cohort of `patients` patients with 1-3 slides each and patient-level labels.
fn cohort() -> impl Strategy<Value = Vec<Bag>> {
    prop::collection::vec((0usize..2, 1usize..4), 10..40).prop_map(|patients| {
        let mut bags = Vec::new();
        for (p, (label, slides)) in patients.into_iter().enumerate() {
            for s in 0..slides {
                bags.push(Bag::new(&format!("S{p}_{s}"), &format!("P{p}"), label, 2, vec![0.0; 2]).unwrap());
            }
        }
        bags
    })
}

fn class_counts(bags: &[Bag]) -> BTreeMap<usize, usize> {
    let mut per_patient = BTreeMap::new();
    for b in bags {
        per_patient.insert(b.patient_id.clone(), b.label);
    }
    let mut out = BTreeMap::new();
    for l in per_patient.values() {
        *out.entry(*l).or_insert(0) += 1;
    }
    out
}

proptest! {
    #[test]
    fn folds_partition_patients_and_stratify(bags in cohort(), seed in any::<u64>()) {
        let k = 5;
        let counts = class_counts(&bags);
        prop_assume!(counts.len() == 2 && counts.values().all(|&c| c >= k));
        let folds = make_folds(&bags, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let all: BTreeSet<String> = bags.iter().map(|b| b.patient_id.clone()).collect();
        let mut seen = BTreeSet::new();
        for f in &folds {
            let train: BTreeSet<&String> = f.train_patients.iter().collect();
            let val: BTreeSet<&String> = f.val_patients.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), all.len());
            for p in &f.val_patients {
                prop_assert!(seen.insert(p.clone()), "patient {} validated twice", p);
            }
            // every slide of a patient lands on the same side
            let (tr, va) = split_bags(&bags, f);
            prop_assert_eq!(tr.len() + va.len(), bags.len());
            let tr_p: BTreeSet<&String> = tr.iter().map(|b| &b.patient_id).collect();
            let va_p: BTreeSet<&String> = va.iter().map(|b| &b.patient_id).collect();
            prop_assert!(tr_p.is_disjoint(&va_p));
            // per-class validation counts within one of an even split
            for (&c, &n) in &counts {
                let in_val = va.iter().filter(|b| b.label == c).map(|b| &b.patient_id).collect::<BTreeSet<_>>().len();
                prop_assert!(in_val >= n / k && in_val <= n.div_ceil(k));
            }
        }
        prop_assert_eq!(seen, all);
        let sizes: Vec<usize> = folds.iter().map(|f| f.val_patients.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(&folds, &make_folds(&bags, k, seed).unwrap());
    }

    #[test]
    fn shuffled_labels_keep_class_counts(bags in cohort(), seed in any::<u64>()) {
        let shuffled = shuffle_labels(&bags, seed);
        prop_assert_eq!(class_counts(&bags), class_counts(&shuffled));
        // labels stay constant within a patient
        let mut per_patient: BTreeMap<&String, usize> = BTreeMap::new();
        for b in &shuffled {
            let l = *per_patient.entry(&b.patient_id).or_insert(b.label);
            prop_assert_eq!(l, b.label);
        }
    }

    #[test]
    fn class_weights_balance_the_classes(labels in prop::collection::vec(0usize..3, 1..60)) {
        let w = class_weights(&labels, 3);
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        for (c, &wc) in w.iter().enumerate() {
            let n_c = labels.iter().filter(|&&l| l == c).count();
            if present.contains(&c) {
                // every present class carries the same total weight
                prop_assert!((wc * n_c as f64 - labels.len() as f64 / present.len() as f64).abs() < 1e-9);
            } else {
                prop_assert_eq!(wc, 0.0);
            }
        }
    }

    #[test]
    fn mil_logits_ignore_patch_order(n in 1usize..40, seed in any::<u64>()) {
        let cfg = MilConfig { dim: 16, heads: 4, ..MilConfig::default() };
        let mut store = ParamStore::new(DType::F32);
        let model = MilModel::new(&cfg, 12, 2, &mut store, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..12).map(|j| ((i * 31 + j * 7) as f32 * 0.37 + seed as f32 * 1e-3).sin()).collect())
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let t = |order: &[usize]| {
            let flat: Vec<f32> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            Tensor::from_vec(flat, (n, 12), &Device::Cpu).unwrap()
        };
        let id: Vec<usize> = (0..n).collect();
        let a = model.forward(&t(&id)).unwrap().to_vec1::<f32>().unwrap();
        let b = model.forward(&t(&perm)).unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5, "{:?} vs {:?}", a, b);
        }
    }
}

#[test]
fn too_few_patients_per_class_is_an_error() {
    let bags: Vec<Bag> = (0..12)
        .map(|i| Bag::new(&format!("S{i}"), &format!("P{i}"), usize::from(i < 3), 1, vec![0.0]).unwrap())
        .collect();
    assert!(make_folds(&bags, 5, 0).is_err());
    assert!(make_folds(&bags, 3, 0).is_ok());
}
