//! Generation-job emission for both dataset profiles.

use pavad_core::config::ProfileName;
use pavad_core::curate::{emit_generation_manifest, GenerationDefaults, Provenance, RefinedPrompt, Scored, Selection};
use pavad_core::io::{read_generation_manifest, write_generation_manifest};

fn selections(classes: usize, per_class: usize) -> (Vec<Selection>, Vec<RefinedPrompt>) {
    let mut sels = Vec::new();
    let mut prompts = Vec::new();
    for c in 0..classes {
        let class_name = format!("class{c:02}");
        let inits: Vec<Scored> = (0..per_class)
            .map(|i| Scored {
                id: format!("img{i:02}"),
                score: 1.0,
                scene_id: "s".into(),
                source_path: format!("inits/{class_name}_{i}.jpg"),
            })
            .collect();
        // Prompts are matched by key, not position.
        for init in inits.iter().rev() {
            prompts.push(RefinedPrompt {
                class_name: class_name.clone(),
                init_id: init.id.clone(),
                phrase: format!("Generate {class_name} behavior"),
                full_prompt: format!("Generate {class_name} behavior near {}", init.id),
                provenance: Provenance::Fallback,
            });
        }
        sels.push(Selection { class_name, inits });
    }
    (sels, prompts)
}

#[test]
fn job_counts_match_both_datasets() {
    for (profile, classes, per_class, total, guidance) in [
        (ProfileName::Sht, 14, 10, 140, (3.5, 3.5)),
        (ProfileName::Ucf, 13, 20, 260, (6.5, 4.5)),
    ] {
        let (sels, prompts) = selections(classes, per_class);
        let jobs = emit_generation_manifest(&sels, &prompts, &GenerationDefaults::for_profile(profile)).unwrap();
        assert_eq!(jobs.len(), total);
        assert_eq!(jobs[1].prompt, "Generate class00 behavior near img01");
        for j in &jobs {
            assert_eq!(j.resolution, (832, 480));
            assert_eq!((j.frame_count, j.fps, j.sampling_steps), (81, 16, 25));
            assert_eq!(j.guidance, guidance);
            assert!(j.init_image_path.contains(&j.class_name));
            assert!(j
                .prompt
                .starts_with(&format!("Generate {} behavior near img", j.class_name)));
        }
    }
}

#[test]
fn empty_and_mismatched_inputs() {
    let d = GenerationDefaults::for_profile(ProfileName::Sht);
    assert!(emit_generation_manifest(&[], &[], &d).unwrap().is_empty());
    let (sels, mut prompts) = selections(2, 3);
    prompts.pop();
    assert!(emit_generation_manifest(&sels, &prompts, &d).is_err());
    let (sels, mut prompts) = selections(2, 3);
    prompts[0].init_id = "elsewhere".into();
    assert!(emit_generation_manifest(&sels, &prompts, &d).is_err());
}

#[test]
fn manifest_file_round_trips() {
    let (sels, prompts) = selections(3, 2);
    let jobs = emit_generation_manifest(&sels, &prompts, &GenerationDefaults::for_profile(ProfileName::Ucf)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("jobs.json");
    write_generation_manifest(&jobs, &path).unwrap();
    assert_eq!(read_generation_manifest(&path).unwrap(), jobs);
}
