#include "abus/patches.hpp"

#include "abus/errors.hpp"

namespace abus {

namespace fs = std::filesystem;

Case load_case(const ManifestEntry& e, const fs::path& dir) {
  Case c;
  c.case_id = e.case_id;
  c.image = read_volume(dir / e.image);
  if (!e.mask.empty()) {
    c.mask = read_volume(dir / e.mask);
    if (!same_grid(c.image, c.mask))
      throw ConfigError("case '" + e.case_id + "': mask grid " + to_string(c.mask.extents) +
                        " does not match image grid " + to_string(c.image.extents));
  }
  c.lesions = e.lesions;
  return c;
}

std::vector<Case> load_cases(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) throw ConfigError("manifest " + manifest_path.string() + " does not exist");
  const Manifest m = read_manifest(manifest_path);
  std::vector<Case> out;
  for (const auto& e : m.cases) out.push_back(load_case(e, manifest_path.parent_path()));
  return out;
}

void to_json(nlohmann::json& j, const PatchOptions& p) {
  j = nlohmann::json{{"extents", {p.extents.d, p.extents.h, p.extents.w}},
                     {"dimensionality", p.dimensionality},
                     {"paths", p.paths},
                     {"second_path_scale", p.second_path_scale},
                     {"scale_augmentation", p.scale_augmentation}};
}

void from_json(const nlohmann::json& j, PatchOptions& p) {
  PatchOptions d;
  if (j.contains("extents")) {
    const auto& e = j.at("extents");
    if (!e.is_array() || e.size() != 3) throw ConfigError("patch extents must be a 3-element array");
    d.extents = {e[0].get<Index>(), e[1].get<Index>(), e[2].get<Index>()};
  }
  d.dimensionality = j.value("dimensionality", d.dimensionality);
  d.paths = j.value("paths", d.paths);
  d.second_path_scale = j.value("second_path_scale", d.second_path_scale);
  d.scale_augmentation = j.value("scale_augmentation", d.scale_augmentation);
  validate_schedule(d.scale_augmentation);
  p = d;
}

namespace {

TensorF target_tensor(const Volume& mask_patch, int dimensionality) {
  return dimensionality == 2 ? slice_tensor(mask_patch, 0) : to_tensor(mask_patch);
}

}  // namespace

std::vector<Sample> make_samples(const Case& c, const PatchOptions& o) {
  if (c.mask.data.empty()) throw ConfigError("case '" + c.case_id + "' has no mask to train on");
  std::vector<Sample> out;
  for (const LesionAnnotation& lesion : c.lesions) {
    if (o.dimensionality == 2) {
      // Slices of this lesion: those where its 3-D patch holds lesion voxels.
      const Volume local = crop_patch(c.mask, lesion.center, {c.mask.extents.d, o.extents.h, o.extents.w}, 0.0f);
      for (Index z : lesion_slice_indices(local)) {
        const Index vz = z + lesion.center.z - c.mask.extents.d / 2;
        if (vz < 0 || vz >= c.mask.extents.d) continue;
        const Index plane = c.image.extents.h * c.image.extents.w;
        Volume img({1, c.image.extents.h, c.image.extents.w}, c.image.spacing, VoxelType::r32);
        Volume msk({1, c.image.extents.h, c.image.extents.w}, c.image.spacing, VoxelType::u8);
        std::copy_n(c.image.data.begin() + vz * plane, plane, img.data.begin());
        std::copy_n(c.mask.data.begin() + vz * plane, plane, msk.data.begin());
        const Index3 centre{0, lesion.center.y, lesion.center.x};
        const Extent3 e{1, o.extents.h, o.extents.w};
        PatchInputs in = make_patch_inputs(img, centre, e, o.paths, o.second_path_scale, 2);
        out.push_back({c.case_id, std::move(in.tensors), target_tensor(crop_patch(msk, centre, e, 0.0f), 2), 1.0});
      }
      continue;
    }
    PatchInputs in = make_patch_inputs(c.image, lesion.center, o.extents, o.paths, o.second_path_scale, 3);
    const Volume target = crop_patch(c.mask, lesion.center, o.extents, 0.0f);
    const bool clipped = boundary_positive_count(target) > 0;
    out.push_back({c.case_id, std::move(in.tensors), target_tensor(target, 3), 1.0});
    if (!clipped) continue;
    const Vec3 p = c.image.physical(lesion.center);
    for (double s : o.scale_augmentation) {
      const Volume mask = resample(c.mask, s, Interp::nearest);
      const Index3 centre = mask.nearest_voxel(p);
      const Volume t = crop_patch(mask, centre, o.extents, 0.0f);
      if (boundary_positive_count(t) > 0) continue;
      const Volume image = resample(c.image, s, Interp::trilinear);
      PatchInputs scaled = make_patch_inputs(image, centre, o.extents, o.paths, o.second_path_scale, 3);
      out.push_back({c.case_id, std::move(scaled.tensors), target_tensor(t, 3), s});
      break;
    }
  }
  return out;
}

std::vector<Sample> make_samples(const std::vector<Case>& cases, const PatchOptions& o) {
  std::vector<Sample> out;
  for (const Case& c : cases) {
    std::vector<Sample> s = make_samples(c, o);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

}  // namespace abus
