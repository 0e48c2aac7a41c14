#pragma once

#include <stdexcept>
#include <string>

namespace super {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonPositiveDepth : Error {
  NonPositiveDepth() : Error("point depth is non-positive") {}
};

struct InvalidDepth : Error {
  InvalidDepth() : Error("depth value is non-positive or non-finite") {}
};

struct InsufficientNodes : Error {
  InsufficientNodes() : Error("not enough graph nodes for the requested neighbor count") {}
};

struct DimensionMismatch : Error {
  explicit DimensionMismatch(const std::string& what) : Error(what) {}
};

struct BehindCamera : Error {
  BehindCamera() : Error("point lies behind the camera") {}
};

struct CameraInsideCylinder : Error {
  CameraInsideCylinder() : Error("camera center lies inside the cylinder") {}
};

struct NonFiniteSystem : Error {
  NonFiniteSystem() : Error("linear system contains non-finite values") {}
};

struct EmptyCluster : Error {
  EmptyCluster() : Error("tracked-point cluster is empty") {}
};

struct EmptyFrame : Error {
  EmptyFrame() : Error("no valid unmasked depth pixels in frame") {}
};

struct ZeroNormal : Error {
  ZeroNormal() : Error("blended normal vanished") {}
};

struct SolverDiverged : Error {
  SolverDiverged() : Error("damping factor exceeded divergence limit") {}
};

struct MissingGroundTruth : Error {
  MissingGroundTruth() : Error("dataset has no ground-truth file") {}
};

struct IOFailure : Error {
  explicit IOFailure(const std::string& what) : Error(what) {}
};

}  // namespace super
