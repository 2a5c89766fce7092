use rili_bench::{examples, phantom_volume, random_tensor, scores_and_labels};

#[test]
fn fixtures_are_seeded() {
    assert_eq!(random_tensor([3, 4], 1).data(), random_tensor([3, 4], 1).data());
    assert_ne!(random_tensor([3, 4], 1).data(), random_tensor([3, 4], 2).data());
    let (s, l) = scores_and_labels(100, 0);
    assert_eq!((s.len(), l.iter().filter(|&&x| x == 1).count()), (100, 50));
    assert_eq!(phantom_volume([4, 4, 2], 3).voxels, phantom_volume([4, 4, 2], 3).voxels);
    let ex = examples(3, 8, 0);
    assert!(ex.iter().all(|e| e.image.values.len() == 3 * 8 * 8));
}
